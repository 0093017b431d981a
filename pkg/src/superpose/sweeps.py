"""Reusable verification sweeps behind the command line and the acceptance suite.

Each sweep cell is a pure function of its arguments, so cells can run in any
order or in separate processes without changing results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bounds as _b
from . import rng as _rng
from .attention import (
    AttentionInstance,
    ChannelGrid,
    FeatureKind,
    RowKind,
    bind_grid,
    build_feature_map,
    exact_softmax_attention,
    favor_plus,
    favor_plus_s,
    grid_cell_keys,
    relu_kernel_closed_form,
    unbind_attention_only,
)

_CHUNK = 1 << 18


# -- ReLU kernel ---------------------------------------------------------------


def relu_kernel_monte_carlo(x, y, samples: int, seed: int, method: str = "stratified") -> float:
    """Sampled ``E[ReLU(w.x) ReLU(w.y)]`` with ``w ~ N(0, I)``.

    ``plain`` averages over full Gaussian draws. ``stratified`` uses that only
    the projection of ``w`` onto span(x, y) matters; that projection is an
    isotropic planar Gaussian whose squared radius (mean 2) is independent of
    its angle, so the radius is integrated exactly and the angle is sampled
    with one uniform draw per equal-width stratum.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be matching vectors")
    g = _rng.stream(seed)
    if method == "plain":
        total = 0.0
        for start in range(0, samples, _CHUNK):
            w = g.standard_normal((min(_CHUNK, samples - start), x.size))
            total += float(np.sum(np.maximum(w @ x, 0.0) * np.maximum(w @ y, 0.0)))
        return total / samples
    if method != "stratified":
        raise ValueError(f"unknown method {method!r}; use 'plain' or 'stratified'")
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        return 0.0
    e1 = x / nx
    a = float(y @ e1)
    rest = y - a * e1
    b = float(np.linalg.norm(rest))
    phi = 2.0 * math.pi * (np.arange(samples) + g.random(samples)) / samples
    c, s = np.cos(phi), np.sin(phi)
    f = np.maximum(nx * c, 0.0) * np.maximum(a * c + b * s, 0.0)
    return 2.0 * float(f.mean())


def kernel_pairs(seed: int, count: int = 20, dim: int = 5, rho_span: float = 0.99):
    """``count`` random (x, y) pairs whose correlations are evenly spaced on ``[-rho_span, rho_span]``."""
    if count < 1 or dim < 2:
        raise ValueError("need count >= 1 and dim >= 2")
    g = _rng.stream(seed, 1)
    rhos = np.linspace(-rho_span, rho_span, count) if count > 1 else np.array([0.0])
    out = []
    for rho in rhos:
        basis, _ = np.linalg.qr(g.standard_normal((dim, 2)))
        u, v = basis[:, 0], basis[:, 1]
        nx, ny = g.uniform(0.5, 2.0, 2)
        out.append((nx * u, ny * (rho * u + math.sqrt(1.0 - rho * rho) * v), float(rho)))
    return out


def kernel_check(seed: int, pairs: int = 20, samples: int = 10**6, dim: int = 5, method: str = "stratified") -> list[dict]:
    rows = []
    for i, (x, y, rho) in enumerate(kernel_pairs(seed, pairs, dim)):
        exact = relu_kernel_closed_form(x, y)
        mc = relu_kernel_monte_carlo(x, y, samples, _rng.derive_seed(seed, 2, i), method)
        rows.append({"pair": i, "rho": rho, "closed_form": exact, "monte_carlo": mc,
                     "rel_err": abs(mc - exact) / exact})
    return rows


# -- random-feature attention fidelity -------------------------------------------


def favor_deviation(R: int, seed: int, L: int = 16, D: int = 8, norm: float = 0.9) -> float:
    """Max relative entrywise deviation of positive-feature attention from exact softmax attention.

    Keys and queries are uniform on the sphere of radius ``norm``; values have
    the same norm with nonnegative entries, so every exact output entry is a
    convex combination bounded away from zero and the entrywise ratio stays
    well conditioned.
    """
    if not 0 < norm <= 1:
        raise ValueError("norm must be in (0, 1]")
    g = _rng.stream(seed, 5)
    k, q, v = (_rng.unit_sphere(g, (L, D)) * norm for _ in range(3))
    inst = AttentionInstance(k, q, np.abs(v))
    approx = favor_plus(inst, build_feature_map(seed, R, D, FeatureKind.POSITIVE_SOFTMAX)).output
    exact = exact_softmax_attention(inst)
    return float(np.max(np.abs(approx - exact) / np.abs(exact)))


def favor_sweep(features, seeds: int = 8, base_seed: int = 0, L: int = 16, D: int = 8) -> list[dict]:
    rows = []
    for R in features:
        devs = [favor_deviation(R, _rng.derive_seed(base_seed, s), L, D) for s in range(seeds)]
        rows.append({"R": R, "L": L, "D": D, "seeds": seeds, "median_max_rel_dev": float(np.median(devs))})
    return rows


def random_grid(seed: int, M: int, N: int, L: int, D: int) -> ChannelGrid:
    """Unbound grid with correlated keys and queries of norm about ``D^(1/4)``."""
    g = _rng.stream(seed, 1)
    k = g.standard_normal((M, N, L, D)) * D**-0.25
    q = k + 0.5 * g.standard_normal((M, N, L, D)) * D**-0.25
    v = g.standard_normal((M, N, L, D))
    return ChannelGrid(k, q, v, grid_cell_keys(seed, M, N, D, 2))


def favor_s_errors(D: int, seed: int, M: int = 2, N: int = 2, L: int = 8, R: int = 2048) -> tuple[list, list]:
    """Per-channel errors of superposed attention against per-channel positive-feature attention.

    Returns ``(signal, l2)``: ``|<e, o>| / |o|^2`` (error along the intended
    output) and ``|e| / |o|`` (full relative L2, which keeps a dimension-free
    crosstalk floor), where ``o`` is the channel's own attention output in the
    key-bound domain and ``e`` the superposed result minus ``o``.
    """
    grid = bind_grid(random_grid(seed, M, N, L, D))
    fm = build_feature_map(seed, R, D, FeatureKind.POSITIVE_SOFTMAX, RowKind.ORTHOGONAL, 3)
    res = favor_plus_s(grid, fm)
    out, _ = unbind_attention_only(res.S, res.B, grid.cell_keys)
    signal, l2 = [], []
    for m in range(M):
        for n in range(N):
            o = favor_plus(grid.cell(m, n), fm).output * grid.cell_keys[m, n]
            e = out[m, n] - o
            oo = float(np.sum(o * o))
            signal.append(abs(float(np.sum(e * o))) / oo)
            l2.append(math.sqrt(float(np.sum(e * e)) / oo))
    return signal, l2


def favor_s_sweep(dims, families: int = 16, base_seed: int = 0, M: int = 2, N: int = 2,
                  L: int = 8, R: int = 2048) -> list[dict]:
    rows = []
    for D in dims:
        sig, l2 = [], []
        for f in range(families):
            a, b = favor_s_errors(D, _rng.derive_seed(base_seed, f), M, N, L, R)
            sig += a
            l2 += b
        rows.append({"M": M, "N": N, "D": D, "L": L, "R": R, "families": families,
                     "median_signal_err": float(np.median(sig)), "median_l2_err": float(np.median(l2))})
    return rows


def strictly_decreasing(values) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


# -- tail-bound cells ------------------------------------------------------------


@dataclass(frozen=True)
class BoundCell:
    """One configuration of a tail-bound sweep; ``param`` is alpha (or beta for the Hadamard bound)."""

    kind: str
    dim: int
    param: float
    trials: int
    seed: int
    channels: int = 4
    grid: tuple[int, int] = (2, 2)


BOUND_KINDS = ("hoeffding", "cleanup", "favor-s", "hadamard")


def run_bound_cell(cell: BoundCell) -> _b.BoundReport:
    if cell.kind == "hoeffding":
        return _b.estimate_interference_probability(cell.dim, cell.param, cell.trials, cell.seed)
    if cell.kind == "cleanup":
        values = _rng.unit_sphere(_rng.stream(cell.seed, 7), (cell.channels, cell.dim))
        return _b.estimate_cleanup_distortion(values, values[0], 0, cell.param, cell.trials, cell.seed)
    if cell.kind == "favor-s":
        k, q = _b.sphere_grid(cell.seed, *cell.grid, cell.dim)
        return _b.estimate_favor_s_distortion(k, q, 0, 0, cell.param, cell.trials, cell.seed)
    if cell.kind == "hadamard":
        return _b.estimate_hadamard_markov(cell.dim, cell.param, cell.trials, cell.seed)
    raise ValueError(f"unknown bound kind {cell.kind!r}; choose from {', '.join(BOUND_KINDS)}")
