"""Analytic multiply-accumulate (MAC) accounting for superposed conv nets and transformers.

Conventions: one MAC per scalar multiply (its accumulate is free); additions
that only superpose or sum tensors, biases, nonlinearities, softmax and
normalization divisions cost nothing. Counts are exact integers; reports
are scaled to MMAC or GMAC only when presented. Per-sample figures divide
work that is shared by the superposed samples by the number of samples it
serves.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction

UNITS = {"MAC": 1, "MMAC": 10**6, "GMAC": 10**9}


@dataclass(frozen=True)
class ConvLayer:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    in_hw: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.stride, *self.in_hw) < 1:
            raise ValueError(f"conv layer sizes must be positive: {self}")

    @property
    def out_hw(self) -> tuple[int, int]:
        return tuple(-(-d // self.stride) for d in self.in_hw)

    @property
    def macs(self) -> int:
        h, w = self.out_hw
        return self.c_in * self.c_out * self.k * self.k * h * w


@dataclass(frozen=True)
class ConvArchSpec:
    input_shape: tuple[int, int, int]
    first: ConvLayer
    trunk: tuple[ConvLayer, ...]
    bind_dim: int
    unbind_dim: int
    classes: int
    channels: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.classes < 1:
            raise ValueError("channels and classes must be positive")
        c, h, w = self.input_shape
        if self.first.c_in != c or self.first.in_hw != (h, w):
            raise ValueError("first layer does not match the input shape")
        if self.first.c_out != self.bind_dim:
            raise ValueError("binding dimension must equal the first layer's output channels")
        if self.trunk and self.trunk[-1].c_out != self.unbind_dim:
            raise ValueError("unbinding dimension must equal the trunk's output channels")


class TransformerMode(enum.Enum):
    BASELINE = "transformer"
    PERFORMER = "performer"
    ATT_ONLY = "att"
    ATT_MLP = "att+mlp"


@dataclass(frozen=True)
class TransformerArchSpec:
    seq_len: int = 4096
    layers: int = 6
    heads: int = 8
    head_dim: int = 64
    embed: int = 512
    hidden: int = 2048
    features: int = 256
    grid: int = 1
    classes: int = 2
    mode: TransformerMode = TransformerMode.PERFORMER

    def __post_init__(self):
        object.__setattr__(self, "mode", TransformerMode(self.mode))
        if min(self.seq_len, self.layers, self.heads, self.head_dim, self.embed,
               self.hidden, self.features, self.grid, self.classes) < 1:
            raise ValueError("transformer sizes must be positive")
        if self.mode in (TransformerMode.BASELINE, TransformerMode.PERFORMER) and self.grid != 1:
            raise ValueError(f"{self.mode.value} has no superposition grid")


@dataclass(frozen=True)
class MacReport:
    components: dict
    unit: str = "MMAC"
    label: str = ""

    @property
    def total(self) -> Fraction:
        return sum(self.components.values(), Fraction(0))

    def scaled(self) -> dict:
        div = UNITS[self.unit]
        return {k: float(Fraction(v) / div) for k, v in self.components.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "unit": self.unit,
            "components": self.scaled(),
            "total": float(self.total / UNITS[self.unit]),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def speedup(a: MacReport, b: MacReport) -> float:
    if a.unit != b.unit:
        raise ValueError("reports use different units")
    if b.total == 0:
        raise ValueError("cannot divide by a zero-cost report")
    return float(a.total / b.total)


def macs_mimoconv(spec: ConvArchSpec) -> MacReport:
    """Per-sample MACs. Only the trunk runs in superposition, so only it is divided by N."""
    _, h, w = spec.input_shape
    comps = {
        "first_layer": Fraction(spec.first.macs),
        "binding": Fraction(spec.bind_dim**2 * h * w),
        "trunk": Fraction(sum(layer.macs for layer in spec.trunk), spec.channels),
        "unbinding": Fraction(spec.unbind_dim**2),
        "classifier": Fraction(spec.unbind_dim * spec.classes),
    }
    return MacReport(comps, "MMAC", f"mimoconv N={spec.channels}")


def _attention_pass(s: TransformerArchSpec, rows: int, cols: int, projected_streams: int) -> int:
    """MACs of one superposed random-feature attention pass over all heads of one layer.

    ``rows`` key-side streams and ``cols`` query-side streams each need their
    feature map and their half of the value-key product; every channel needs
    its own normalizer. ``projected_streams`` streams go through the output
    projection.
    """
    L, d, r = s.seq_len, s.head_dim, s.features
    per_head = (rows + cols) * 2 * L * d * r + rows * cols * L * r
    return s.heads * per_head + projected_streams * L * s.embed**2


def macs_mimoformer(spec: TransformerArchSpec) -> MacReport:
    """Per-sample MACs of the full encoder; see the module notes for the convention."""
    s = spec
    L, E, layers = s.seq_len, s.embed, s.layers
    mode = s.mode
    samples = s.grid * s.grid
    # q/k/v projections run per sample in every variant; plus one scale per token feature
    proj = layers * (3 * L * E * (s.heads * s.head_dim) + L * E)
    mlp_one = layers * (2 * L * E * s.hidden + L * E)
    readout = E * s.hidden + s.hidden * s.classes

    if mode is TransformerMode.BASELINE:
        att = Fraction(layers * (2 * L * L * s.heads * s.head_dim + L * E * E))
        bind = Fraction(0)
        mlp = Fraction(mlp_one)
    elif mode is TransformerMode.PERFORMER:
        att = Fraction(layers * _attention_pass(s, 1, 1, 1))
        bind = Fraction(0)
        mlp = Fraction(mlp_one)
    elif mode is TransformerMode.ATT_ONLY:
        att = Fraction(layers * _attention_pass(s, s.grid, s.grid, samples), samples)
        bind = Fraction(layers * 4 * L * E)  # bind k, q, v; unbind the attention output
        mlp = Fraction(mlp_one)
    else:
        att = Fraction(layers * _attention_pass(s, s.grid, s.grid, s.grid), samples)
        bind = Fraction(layers * 5 * L * E)  # also binds the skip path
        # one MLP per query-side stream, each stream serving `grid` samples
        mlp = Fraction(mlp_one * s.grid, samples)
    comps = {
        "projections": Fraction(proj),
        "attention": att,
        "bind_unbind": bind,
        "mlp": mlp,
        "readout": Fraction(readout),
    }
    label = mode.value if s.grid == 1 else f"{mode.value} grid={s.grid}x{s.grid}"
    return MacReport(comps, "GMAC", label)


# -- presets -------------------------------------------------------------------


def wide_resnet_trunk(depth: int = 28, widen: int = 10, in_channels: int = 64, hw: int = 32) -> tuple[ConvLayer, ...]:
    """3x3 conv trunk of a wide residual network with 1x1 projection shortcuts."""
    if (depth - 4) % 6:
        raise ValueError("depth must be 6n + 4")
    per_group = (depth - 4) // 6
    layers = []
    c_in, size = in_channels, hw
    for g, base in enumerate((16, 32, 64)):
        width = base * widen
        for b in range(per_group):
            stride = 2 if (g > 0 and b == 0) else 1
            layers.append(ConvLayer(c_in, width, 3, stride, (size, size)))
            if c_in != width or stride != 1:
                layers.append(ConvLayer(c_in, width, 1, stride, (size, size)))
            size = -(-size // stride)
            layers.append(ConvLayer(width, width, 3, 1, (size, size)))
            c_in = width
    return tuple(layers)


def mimoconv_cifar(channels: int = 1, classes: int = 100, bind_dim: int = 64) -> ConvArchSpec:
    trunk = wide_resnet_trunk(in_channels=bind_dim)
    return ConvArchSpec(
        input_shape=(3, 32, 32),
        first=ConvLayer(3, bind_dim, 3, 1, (32, 32)),
        trunk=trunk,
        bind_dim=bind_dim,
        unbind_dim=trunk[-1].c_out,
        classes=classes,
        channels=channels,
    )


def mimoformer_text(mode="performer", grid: int = 1) -> TransformerArchSpec:
    return TransformerArchSpec(mode=TransformerMode(mode), grid=grid)


PRESETS = {
    "mimoconv-cifar100": "conv",
    "mimoconv-cifar10": "conv",
    "mimoformer-text": "transformer",
}


def format_table(reports: list[MacReport], digits: int = 2) -> str:
    """Aligned text table, one row per report, columns per component plus total."""
    if not reports:
        return ""
    unit = reports[0].unit
    cols = list(reports[0].components)
    header = ["config"] + cols + ["total"]
    rows = []
    for r in reports:
        vals = r.scaled()
        rows.append([r.label] + [_fmt(vals[c], digits) for c in cols] + [_fmt(float(r.total / UNITS[unit]), digits)])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))
    return "\n".join([f"[{unit} per sample]", line(header)] + [line(r) for r in rows])


def _fmt(v: float, digits: int) -> str:
    # sub-unit cells keep two significant digits so small components stay visible
    if v == 0 or abs(v) >= 1:
        return f"{v:.{digits}f}"
    sig = max(digits, 1 - int(math.floor(math.log10(abs(v)))))
    return f"{v:.{sig}f}"
