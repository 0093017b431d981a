"""Vector-symbolic substrate: keys, binding, unbinding, superposition, cleanup.

Two binding families are provided. The multiply-add-permute family binds with
a Hadamard product, which is exactly self-inverse for bipolar keys. The
holographic family binds with circular convolution and is applied per pixel
fiber to image tensors (position-wise binding); its learned counterpart for
unbinding is a plain square matrix.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as _rng


class KeyKind(enum.Enum):
    BIPOLAR = "bipolar"
    GAUSSIAN = "gaussian"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KeyVector:
    """A binding key. Bipolar keys hold signs, Gaussian keys N(0, 1/D) entries."""

    entries: np.ndarray
    kind: KeyKind = KeyKind.GAUSSIAN

    def __post_init__(self):
        e = _frozen(self.entries)
        if e.ndim != 1 or e.size == 0:
            raise ValueError("key entries must be a non-empty vector")
        if not np.all(np.isfinite(e)):
            raise ValueError("key entries must be finite")
        if self.kind is KeyKind.BIPOLAR and not np.all(np.abs(e) == 1.0):
            raise ValueError("bipolar key entries must be +1 or -1")
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class UnbindMatrix:
    """Square unbinding matrix applied to a pooled feature vector."""

    entries: np.ndarray

    def __post_init__(self):
        e = _frozen(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] == 0:
            raise ValueError(f"unbinding matrix must be square, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("unbinding matrix entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class Superposition:
    payload: np.ndarray
    channel_count: int
    key_family_seed: int | None = field(default=None)


def gen_key(seed: int, dim: int, kind: KeyKind = KeyKind.BIPOLAR, *stream_ids: int) -> KeyVector:
    """Draw a key of dimension ``dim``; deterministic in ``(seed, stream_ids, dim, kind)``."""
    if dim < 1:
        raise ValueError(f"key dimension must be >= 1, got {dim}")
    kind = KeyKind(kind)
    g = _rng.stream(seed, *stream_ids)
    if kind is KeyKind.BIPOLAR:
        return KeyVector(_rng.rademacher(g, dim), kind)
    return KeyVector(g.standard_normal(dim) / math.sqrt(dim), kind)


def gen_keys(seed: int, count: int, dim: int, kind: KeyKind = KeyKind.BIPOLAR) -> list[KeyVector]:
    """``count`` independent keys, key ``i`` drawn from sub-stream ``i``."""
    return [gen_key(seed, dim, kind, i) for i in range(count)]


def _entries(key) -> np.ndarray:
    return key.entries if isinstance(key, KeyVector) else np.asarray(key, dtype=np.float64)


def _check_same_length(a: np.ndarray, x: np.ndarray) -> None:
    if a.shape[-1] != x.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} != {x.shape[-1]}")


def bind_hadamard(key, x) -> np.ndarray:
    """Elementwise product ``key * x`` along the last axis."""
    a = _entries(key)
    x = np.asarray(x, dtype=np.float64)
    _check_same_length(a, x)
    return a * x


def unbind_hadamard(key, y) -> np.ndarray:
    """Same product as binding; an exact inverse only for bipolar keys."""
    return bind_hadamard(key, y)


def circulant(a) -> np.ndarray:
    """Matrix ``C`` with ``C @ x == circular_convolve(a, x)``, i.e. ``C[d, j] = a[(d - j) % D]``."""
    a = np.asarray(_entries(a), dtype=np.float64)
    d = a.shape[0]
    idx = (np.arange(d)[:, None] - np.arange(d)[None, :]) % d
    return a[idx]


def circular_convolve(a, x, method: str = "auto") -> np.ndarray:
    """``out[d] = sum_j a[j] * x[(d - j) % D]``.

    ``method="direct"`` is the O(D^2) reference sum; ``"fft"`` is the transform
    path; ``"auto"`` picks the direct sum for D <= 128. ``x`` may carry leading
    batch axes.
    """
    a = np.asarray(_entries(a), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("convolution key must be a vector")
    _check_same_length(a, x)
    d = a.shape[0]
    if method == "auto":
        method = "direct" if d <= 128 else "fft"
    if method == "direct":
        return x @ circulant(a).T
    if method == "fft":
        return np.fft.irfft(np.fft.rfft(a) * np.fft.rfft(x, axis=-1), n=d, axis=-1)
    raise ValueError(f"unknown method {method!r}")


def circular_correlate(a, y, method: str = "auto") -> np.ndarray:
    """``out[d] = sum_j a[j] * y[(d + j) % D]``, the transpose of convolution by ``a``."""
    a = np.asarray(_entries(a), dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("correlation key must be a vector")
    _check_same_length(a, y)
    d = a.shape[0]
    if method == "auto":
        method = "direct" if d <= 128 else "fft"
    if method == "direct":
        return y @ circulant(a)
    if method == "fft":
        return np.fft.irfft(np.conj(np.fft.rfft(a)) * np.fft.rfft(y, axis=-1), n=d, axis=-1)
    raise ValueError(f"unknown method {method!r}")


def bind_pwhrr(key, x) -> np.ndarray:
    """Position-wise circular-convolution binding of a ``(..., C, H, W)`` tensor.

    Every pixel fiber ``x[..., :, h, w]`` is convolved with the key, so the
    operation commutes with spatial shifts.
    """
    a = np.asarray(_entries(key), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("expected a (..., C, H, W) tensor")
    if x.shape[-3] != a.shape[0]:
        raise ValueError(f"key dim {a.shape[0]} != channel count {x.shape[-3]}")
    return np.einsum("dc,...chw->...dhw", circulant(a), x)


def unbind_mbat(m, h) -> np.ndarray:
    """Matrix unbinding ``m @ h`` (``h`` may carry leading batch axes)."""
    me = m.entries if isinstance(m, UnbindMatrix) else np.asarray(m, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if me.shape[1] != h.shape[-1]:
        raise ValueError(f"unbinding matrix dim {me.shape[1]} != feature dim {h.shape[-1]}")
    return h @ me.T


def circulant_inverse(a) -> UnbindMatrix:
    """Exact unbinding matrix for convolution by ``a``, by solving the circulant system."""
    c = circulant(a)
    return UnbindMatrix(np.linalg.solve(c, np.eye(c.shape[0])))


def superpose(items: Sequence, key_family_seed: int | None = None) -> Superposition:
    """Elementwise sum of equal-shape tensors, accumulated in list order."""
    if len(items) == 0:
        raise ValueError("cannot superpose an empty list")
    arrays = [np.asarray(x, dtype=np.float64) for x in items]
    shape = arrays[0].shape
    for x in arrays[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch in superposition: {x.shape} != {shape}")
    total = arrays[0].copy()
    for x in arrays[1:]:
        total += x
    return Superposition(total, len(arrays), key_family_seed)


def dictionary_cleanup(s, key, dictionary: Sequence) -> tuple[int, np.ndarray]:
    """Score each dictionary entry by ``<s, key * entry>`` and return the argmax.

    Ties go to the lowest index.
    """
    payload = s.payload if isinstance(s, Superposition) else np.asarray(s, dtype=np.float64)
    if len(dictionary) == 0:
        raise ValueError("dictionary is empty")
    omega = np.asarray(dictionary, dtype=np.float64)
    a = _entries(key)
    _check_same_length(a, payload)
    _check_same_length(a, omega)
    scores = (omega * a) @ payload
    return int(np.argmax(scores)), scores


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine of a zero-norm vector is undefined")
    return float(x @ y / (nx * ny))


def key_orthogonality_loss(keys: Sequence, mu: float) -> float:
    """Penalty pushing keys toward an orthonormal set.

    ``mu / C(N, 2) * sum_{i<j} cos(a_i, a_j)^2 + mu / N * sum_i (|a_i| - 1)^2``;
    the pairwise term is dropped for a single key.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if len(keys) == 0:
        raise ValueError("need at least one key")
    a = np.stack([_entries(k) for k in keys])
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm key: cosine undefined")
    n = a.shape[0]
    unit = a / norms[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    pair = mu / math.comb(n, 2) * float(np.sum(gram[iu] ** 2)) if n > 1 else 0.0
    return pair + mu / n * float(np.sum((norms - 1.0) ** 2))
