"""Computation in superposition: VSA binding, superposed linear attention,
an isometric multi-input conv net, and executable checks of the bounds
that govern channel interference."""

__version__ = "0.1.0"
