"""Softmax attention, random-feature linear attention, and attention over a grid
of key-protected channels.

Shapes follow one convention throughout: a single attention instance holds
``(L, D)`` arrays; a channel grid holds ``(M, N, L, D)`` arrays plus one bipolar
cell key per grid cell, ``(M, N, D)``. Keys are summed over the column axis
(``w``) and queries over the row axis (``t``), so channel ``(m, n)`` is recovered
from row ``m`` of the key side and column ``n`` of the query side.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as _rng

EPS = 1e-12


class MultiplyCounter:
    """Tally of scalar multiplies spent in dense products and elementwise scalings."""

    def __init__(self):
        self.total = 0
        self.by_stage: dict[str, int] = {}

    def add(self, stage: str, count: int) -> None:
        self.total += int(count)
        self.by_stage[stage] = self.by_stage.get(stage, 0) + int(count)


def _tally(counter, stage, count):
    if counter is not None:
        counter.add(stage, count)


class FeatureKind(enum.Enum):
    RELU = "relu"
    POSITIVE_SOFTMAX = "positive_softmax"


class RowKind(enum.Enum):
    IID = "iid"
    ORTHOGONAL = "orthogonal"


@dataclass(frozen=True)
class FeatureMapSpec:
    """A random feature map ``R^D -> R^R``; call it on arrays with last axis D."""

    R: int
    D: int
    kind: FeatureKind
    rows: RowKind
    projection: np.ndarray
    seed: int

    def __call__(self, x, counter: MultiplyCounter | None = None, stage: str = "features") -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.D:
            raise ValueError(f"feature map expects dim {self.D}, got {x.shape[-1]}")
        n_vec = int(np.prod(x.shape[:-1]))
        proj = x @ self.projection.T
        _tally(counter, stage, n_vec * self.R * self.D)
        if self.kind is FeatureKind.RELU:
            out = np.maximum(proj, 0.0) * (1.0 / math.sqrt(self.R * math.sqrt(self.D)))
            _tally(counter, stage, n_vec * self.R)
            return out
        sq = np.sum(x * x, axis=-1, keepdims=True)
        # fold the 1/sqrt(R) factor into the exponent: one multiply per feature
        shift = sq / (2.0 * math.sqrt(self.D)) + 0.5 * math.log(self.R)
        out = np.exp(proj * self.D ** -0.25 - shift)
        _tally(counter, stage, n_vec * (self.R + self.D))
        return out


def _orthogonal_rows(g: np.random.Generator, count: int, dim: int) -> np.ndarray:
    blocks = []
    left = count
    while left > 0:
        q, r = np.linalg.qr(g.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))  # Haar-distributed orthogonal matrix
        take = min(dim, left)
        blocks.append(q.T[:take])
        left -= take
    return np.concatenate(blocks, axis=0)


def build_feature_map(seed: int, R: int, D: int, kind=FeatureKind.POSITIVE_SOFTMAX,
                      rows=RowKind.ORTHOGONAL, *stream_ids: int) -> FeatureMapSpec:
    """Draw ``R`` projection rows of dimension ``D``.

    With orthogonal rows each block of ``D`` rows is orthonormal and then
    rescaled by independent chi(D) norms, so every row is marginally standard
    normal. A trailing partial block keeps the leading rows of a full block.
    """
    if R < 1 or D < 1:
        raise ValueError(f"R and D must be positive, got R={R}, D={D}")
    kind, rows = FeatureKind(kind), RowKind(rows)
    g = _rng.stream(seed, *stream_ids)
    if rows is RowKind.IID:
        w = g.standard_normal((R, D))
    else:
        w = _orthogonal_rows(g, R, D) * np.sqrt(g.chisquare(D, size=R))[:, None]
    w.setflags(write=False)
    return FeatureMapSpec(R, D, kind, rows, w, seed)


@dataclass(frozen=True)
class AttentionInstance:
    keys: np.ndarray
    queries: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        arrs = [np.array(a, dtype=np.float64) for a in (self.keys, self.queries, self.values)]
        if any(a.ndim != 2 for a in arrs):
            raise ValueError("keys, queries and values must be (L, D) arrays")
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError("keys, queries and values must share (L, D)")
        if arrs[0].shape[0] < 1:
            raise ValueError("sequence length must be >= 1")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("attention inputs must be finite")
        for name, a in zip(("keys", "queries", "values"), arrs):
            object.__setattr__(self, name, a)

    @property
    def L(self) -> int:
        return self.keys.shape[0]

    @property
    def D(self) -> int:
        return self.keys.shape[1]


def softmax_weights(inst: AttentionInstance) -> np.ndarray:
    """Row ``i`` holds the softmax over ``j`` of ``<k_j, q_i>/sqrt(D)``."""
    logits = inst.queries @ inst.keys.T / math.sqrt(inst.D)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def exact_softmax_attention(inst: AttentionInstance) -> np.ndarray:
    return softmax_weights(inst) @ inst.values


def relu_kernel_closed_form(x, y) -> float:
    """``E[ReLU(w.x) ReLU(w.y)]`` for ``w ~ N(0, I)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ValueError("ReLU kernel needs nonzero inputs")
    dot = float(x @ y)
    rho = min(1.0, max(-1.0, dot / (nx * ny)))
    a = abs(rho)
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    g = 1.0 if s == 0.0 else (2.0 / math.pi) * (s + a * math.atan(a / s))
    return (dot + nx * ny * g) / 4.0


class FavorOutput(NamedTuple):
    output: np.ndarray
    denominator: np.ndarray
    floored: bool
    multiplies: int


def favor_plus(inst: AttentionInstance, fm: FeatureMapSpec) -> FavorOutput:
    """Linear-time attention: ``A = sum_j v_j phi(k_j)^T`` and ``C = sum_j phi(k_j)`` are built once."""
    if fm.D != inst.D:
        raise ValueError(f"feature map dim {fm.D} != head dim {inst.D}")
    ctr = MultiplyCounter()
    L, D, R = inst.L, inst.D, fm.R
    phik = fm(inst.keys, ctr, "key_features")
    a_mat = inst.values.T @ phik
    ctr.add("value_key", L * D * R)
    c_vec = phik.sum(axis=0)
    phiq = fm(inst.queries, ctr, "query_features")
    num = phiq @ a_mat.T
    ctr.add("numerator", L * D * R)
    den = phiq @ c_vec
    ctr.add("denominator", L * R)
    floored = bool(np.any(den < EPS))
    out = num * (1.0 / np.maximum(den, EPS))[:, None]
    ctr.add("normalize", L * D)
    return FavorOutput(out, den, floored, ctr.total)


# -- channel grid --------------------------------------------------------------


@dataclass(frozen=True)
class ChannelGrid:
    """Per-cell keys, queries and values ``(M, N, L, D)`` with bipolar cell keys ``(M, N, D)``."""

    keys: np.ndarray
    queries: np.ndarray
    values: np.ndarray
    cell_keys: np.ndarray

    def __post_init__(self):
        arrs = [np.array(a, dtype=np.float64) for a in (self.keys, self.queries, self.values)]
        if any(a.ndim != 4 for a in arrs) or not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError("grid tokens must be matching (M, N, L, D) arrays")
        ck = np.array(self.cell_keys, dtype=np.float64)
        m, n, _, d = arrs[0].shape
        if ck.shape != (m, n, d):
            raise ValueError(f"cell keys must have shape {(m, n, d)}, got {ck.shape}")
        if not np.all(np.abs(ck) == 1.0):
            raise ValueError("cell keys must be bipolar")
        for name, a in zip(("keys", "queries", "values", "cell_keys"), arrs + [ck]):
            object.__setattr__(self, name, a)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.keys.shape

    @classmethod
    def from_instances(cls, cells, cell_keys) -> "ChannelGrid":
        """Build from an ``M x N`` nested list of :class:`AttentionInstance`."""
        pick = lambda attr: np.array([[getattr(c, attr) for c in row] for row in cells])
        return cls(pick("keys"), pick("queries"), pick("values"), cell_keys)

    def cell(self, m: int, n: int) -> AttentionInstance:
        return AttentionInstance(self.keys[m, n], self.queries[m, n], self.values[m, n])


def grid_cell_keys(seed: int, rows: int, cols: int, dim: int, *stream_ids: int) -> np.ndarray:
    return _rng.rademacher(_rng.stream(seed, *stream_ids), (rows, cols, dim))


def bind_grid(grid: ChannelGrid) -> ChannelGrid:
    """Multiply every token of cell ``(m, n)`` by that cell's key."""
    a = grid.cell_keys[:, :, None, :]
    return ChannelGrid(grid.keys * a, grid.queries * a, grid.values * a, grid.cell_keys)


class FavorSOutput(NamedTuple):
    S: np.ndarray  # (N, L, D)
    B: np.ndarray  # (M, N, L)
    multiplies: int
    budget: int
    stages: dict


def favor_s_budget(M: int, N: int, L: int, D: int, R: int) -> int:
    """Reference scale ``LMD(R+N) + LND(R+M) + LNDR + LMNR`` for the shared computation."""
    return L * M * D * (R + N) + L * N * D * (R + M) + L * N * D * R + L * M * N * R


def favor_plus_s(bound: ChannelGrid, fm: FeatureMapSpec) -> FavorSOutput:
    """Shared-computation attention over a bound grid; returns unnormalized S and per-channel B."""
    M, N, L, D = bound.shape
    if fm.D != D:
        raise ValueError(f"feature map dim {fm.D} != grid dim {D}")
    R = fm.R
    ctr = MultiplyCounter()
    k_rows = bound.keys.sum(axis=1)          # (M, L, D): sum over w
    v_rows = bound.values.sum(axis=1)        # (M, L, D): sum over q
    q_cols = bound.queries.sum(axis=0)       # (N, L, D): sum over t
    phik = fm(k_rows, ctr, "key_features")   # (M, L, R)
    a_s = v_rows.reshape(M * L, D).T @ phik.reshape(M * L, R)
    ctr.add("value_key", M * L * D * R)
    c_s = phik.sum(axis=1)                   # (M, R)
    phiq = fm(q_cols, ctr, "query_features")  # (N, L, R), shared by S and B
    S = phiq @ a_s.T
    ctr.add("numerator", N * L * D * R)
    B = np.einsum("mr,nlr->mnl", c_s, phiq)
    ctr.add("denominator", M * N * L * R)
    return FavorSOutput(S, B, ctr.total, favor_s_budget(M, N, L, D, R), dict(ctr.by_stage))


def unbind_attention_only(S, B, cell_keys) -> tuple[np.ndarray, bool]:
    """``o[m, n] = S[n] * a[m, n] / B[m, n]``; returns ``(outputs, floored)``."""
    S = np.asarray(S, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    a = np.asarray(cell_keys, dtype=np.float64)
    M, N = B.shape[:2]
    if S.shape[0] != N or a.shape[:2] != (M, N) or a.shape[2] != S.shape[2] or B.shape[2] != S.shape[1]:
        raise ValueError("S, B and cell key shapes disagree")
    floored = bool(np.any(B < EPS))
    out = S[None] * a[:, :, None, :] / np.maximum(B, EPS)[..., None]
    return out, floored


def joint_normalize(S, B) -> np.ndarray:
    """``S[n] / sum_m B[m, n]`` per query position."""
    S = np.asarray(S, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[1:] != S.shape[:2]:
        raise ValueError("S and B shapes disagree")
    return S / np.maximum(B.sum(axis=0), EPS)[..., None]


# -- transformer layers ----------------------------------------------------------


class LayerMode(enum.Enum):
    ATT_ONLY = "att"
    ATT_MLP = "att_mlp"


@dataclass(frozen=True)
class LayerParams:
    """Weights of one pre-activation-free attention + MLP block (row-vector convention)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: int
    features: int = 256
    feature_kind: FeatureKind = FeatureKind.RELU

    def __post_init__(self):
        e = np.asarray(self.wq).shape[0]
        if e % self.heads:
            raise ValueError(f"embedding {e} not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if np.asarray(getattr(self, name)).shape != (e, e):
                raise ValueError(f"{name} must be {e}x{e}")
        hidden = np.asarray(self.w1).shape[1]
        if np.asarray(self.w1).shape != (e, hidden) or np.asarray(self.w2).shape != (hidden, e):
            raise ValueError("MLP weights have inconsistent shapes")

    @property
    def embed(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.embed // self.heads


def init_layer_params(seed: int, embed: int, heads: int, hidden: int, features: int = 256,
                      feature_kind=FeatureKind.RELU) -> LayerParams:
    g = _rng.stream(seed)
    sq = lambda: g.standard_normal((embed, embed)) / math.sqrt(embed)
    return LayerParams(
        wq=sq(), wk=sq(), wv=sq(), wo=sq(),
        w1=g.standard_normal((embed, hidden)) / math.sqrt(embed), b1=np.zeros(hidden),
        w2=g.standard_normal((hidden, embed)) / math.sqrt(hidden), b2=np.zeros(embed),
        heads=heads, features=features, feature_kind=FeatureKind(feature_kind),
    )


class LayerKeys(NamedTuple):
    favor: np.ndarray  # (M, N, heads, head_dim) bipolar, binds keys/queries/values
    skip: np.ndarray   # (M, N, embed) bipolar, binds the skip path and unbinds the output


def layer_keys(seed: int, layer_index: int, M: int, N: int, params: LayerParams) -> LayerKeys:
    g_favor = _rng.stream(seed, layer_index, 1)
    g_skip = _rng.stream(seed, layer_index, 2)
    return LayerKeys(
        _rng.rademacher(g_favor, (M, N, params.heads, params.head_dim)),
        _rng.rademacher(g_skip, (M, N, params.embed)),
    )


def layer_feature_maps(seed: int, layer_index: int, params: LayerParams) -> list[FeatureMapSpec]:
    return [
        build_feature_map(seed, params.features, params.head_dim, params.feature_kind,
                          RowKind.ORTHOGONAL, layer_index, 0, h)
        for h in range(params.heads)
    ]


def _mlp(h: np.ndarray, p: LayerParams) -> np.ndarray:
    return np.maximum(h @ p.w1 + p.b1, 0.0) @ p.w2 + p.b2


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads)


def performer_layer(tokens, params: LayerParams, seed: int, layer_index: int = 0) -> np.ndarray:
    """Single-stream reference block on ``(L, E)`` tokens using the same feature maps."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.embed:
        raise ValueError(f"expected (L, {params.embed}) tokens")
    fms = layer_feature_maps(seed, layer_index, params)
    q, k, v = (_split_heads(x @ w, params.heads) for w in (params.wq, params.wk, params.wv))
    att = np.concatenate(
        [favor_plus(AttentionInstance(k[:, h], q[:, h], v[:, h]), fms[h]).output for h in range(params.heads)],
        axis=-1,
    )
    hid = x + att @ params.wo
    return hid + _mlp(hid, params)


def mimoformer_layer(tokens, params: LayerParams, mode=LayerMode.ATT_ONLY, seed: int = 0,
                     layer_index: int = 0, keys: LayerKeys | None = None) -> np.ndarray:
    """Process an ``(M, N, L, E)`` grid of token streams in superposition.

    Attention runs over the bound grid in both modes. ``ATT_ONLY`` unbinds each
    channel right after attention and applies the projection and MLP per
    channel. ``ATT_MLP`` keeps the ``N`` jointly normalized streams, adds the
    skip superposition bound with the second key set, applies projection and
    MLP once per stream, and unbinds with that key set at the output.
    """
    mode = LayerMode(mode)
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("tokens must be an (M, N, L, E) array")
    M, N, L, E = x.shape
    if E != params.embed:
        raise ValueError(f"token width {E} != layer embedding {params.embed}")
    keys = keys if keys is not None else layer_keys(seed, layer_index, M, N, params)
    if keys.favor.shape != (M, N, params.heads, params.head_dim) or keys.skip.shape != (M, N, E):
        raise ValueError("layer key shapes do not match the grid and embedding")
    fms = layer_feature_maps(seed, layer_index, params)
    q, k, v = (_split_heads(x @ w, params.heads) for w in (params.wq, params.wk, params.wv))

    heads_out = []
    for h in range(params.heads):
        grid = ChannelGrid(k[..., h, :], q[..., h, :], v[..., h, :], keys.favor[:, :, h])
        res = favor_plus_s(bind_grid(grid), fms[h])
        if mode is LayerMode.ATT_ONLY:
            heads_out.append(unbind_attention_only(res.S, res.B, grid.cell_keys)[0])
        else:
            heads_out.append(joint_normalize(res.S, res.B))
    att = np.concatenate(heads_out, axis=-1)

    if mode is LayerMode.ATT_ONLY:
        hid = x + att @ params.wo
        return hid + _mlp(hid, params)
    skip = np.sum(x * keys.skip[:, :, None, :], axis=0)  # (N, L, E)
    hid = skip + att @ params.wo
    y = hid + _mlp(hid, params)
    return y[None] * keys.skip[:, :, None, :]
