"""Closed-form interference bounds and the Monte Carlo estimators that check them.

Each estimator returns a :class:`BoundReport` pairing the empirical frequency
of a distortion event with the matching closed-form bound. All bounds are
clamped to 1, and a bound over an empty set of interference terms is 0.
Monte Carlo trials are drawn in fixed-size chunks, chunk ``c`` from the
sub-stream ``(seed, c)``, so results depend only on the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as _rng

# Upper bound on float64 entries materialised per Monte Carlo chunk.
_CHUNK_BUDGET = 1 << 21


@dataclass(frozen=True)
class BoundReport:
    bound_value: float
    empirical_probability: float
    trials: int
    violations: int
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def standard_error(self) -> float:
        """Binomial standard error of a frequency whose true value equals the bound."""
        b = self.bound_value
        return math.sqrt(b * (1.0 - b) / self.trials)

    def dominated(self, n_se: float = 3.0) -> bool:
        """True when the empirical frequency is within ``n_se`` standard errors of the bound."""
        return self.empirical_probability <= self.bound_value + n_se * self.standard_error

    def to_dict(self) -> dict:
        return {
            "bound": self.bound_value,
            "empirical": self.empirical_probability,
            "trials": self.trials,
            "violations": self.violations,
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _report(bound: float, violations: int, trials: int, seed: int, **config) -> BoundReport:
    return BoundReport(
        bound_value=float(min(1.0, bound)),
        empirical_probability=violations / trials,
        trials=trials,
        violations=int(violations),
        seed=seed,
        config=config,
    )


def _chunks(trials: int, per_trial: int):
    size = max(1, min(trials, _CHUNK_BUDGET // max(1, per_trial)))
    start, c = 0, 0
    while start < trials:
        n = min(size, trials - start)
        yield c, n
        start += n
        c += 1


def _check_trials(trials: int) -> None:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")


def _check_alpha(alpha: float, strict: bool = False) -> None:
    if alpha < 0 or (strict and alpha == 0):
        raise ValueError(f"alpha must be {'>' if strict else '>='} 0, got {alpha}")


# -- quasi-orthogonality of random bipolar vectors ---------------------------


def hoeffding_orthogonality_bound(dim: int, alpha: float) -> float:
    """``min(1, 2 exp(-D alpha^2 / 2))``: chance two bipolar vectors have ``|cos| >= alpha``."""
    _check_alpha(alpha)
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return min(1.0, 2.0 * math.exp(-dim * alpha * alpha / 2.0))


def estimate_interference_probability(dim: int, alpha: float, trials: int, seed: int) -> BoundReport:
    _check_alpha(alpha)
    _check_trials(trials)
    # dot products of bipolar vectors are exact integers in float64
    threshold = alpha * dim * (1.0 - 1e-12)
    hits = 0
    for c, n in _chunks(trials, 2 * dim):
        g = _rng.stream(seed, c)
        x = _rng.rademacher(g, (n, dim))
        y = _rng.rademacher(g, (n, dim))
        hits += int(np.count_nonzero(np.abs(np.einsum("td,td->t", x, y)) >= threshold))
    return _report(hoeffding_orthogonality_bound(dim, alpha), hits, trials, seed,
                   kind="hoeffding", dim=dim, alpha=alpha)


# -- dictionary cleanup -------------------------------------------------------


def _cleanup_terms(values, omega, k: int):
    x = np.asarray(values, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != omega.shape[-1]:
        raise ValueError("values must be an (N, D) array matching the dictionary element")
    if not 0 <= k < x.shape[0]:
        raise ValueError(f"channel index {k} out of range")
    signal = float(x[k] @ omega)
    return x, omega, signal


def cleanup_noise_bound(values, omega, k: int, alpha: float) -> float:
    """Bound on the chance that cleanup of channel ``k`` is distorted beyond ``1 +/- alpha``.

    ``2 exp(-alpha^2 <x_k, omega>^2 / (2 sum_{i != k} |x_i * omega|^2))``, clamped to 1.
    """
    _check_alpha(alpha, strict=True)
    x, omega, signal = _cleanup_terms(values, omega, k)
    if x.shape[0] == 1:
        return 0.0
    if signal == 0.0:
        raise ValueError("<x_k, omega> = 0: the relative distortion bound is undefined")
    mass = sum(float(np.sum((x[i] * omega) ** 2)) for i in range(x.shape[0]) if i != k)
    if mass == 0.0:
        return 0.0
    return min(1.0, 2.0 * math.exp(-alpha * alpha * signal * signal / (2.0 * mass)))


def estimate_cleanup_distortion(values, omega, k: int, alpha: float, trials: int, seed: int) -> BoundReport:
    """Resample bipolar keys per trial and count ``<s, a_k * omega>`` outside ``[1-alpha, 1+alpha] <x_k, omega>``."""
    _check_trials(trials)
    bound = cleanup_noise_bound(values, omega, k, alpha)
    x, omega, signal = _cleanup_terms(values, omega, k)
    n_ch, dim = x.shape
    hits = 0
    for c, n in _chunks(trials, n_ch * dim):
        keys = _rng.rademacher(_rng.stream(seed, c), (n, n_ch, dim))
        s = np.einsum("tid,id->td", keys, x)
        score = np.einsum("td,td->t", s, keys[:, k, :] * omega)
        hits += int(np.count_nonzero(np.abs(score - signal) > alpha * abs(signal)))
    return _report(bound, hits, trials, seed, kind="cleanup", dim=dim, channels=n_ch, k=k, alpha=alpha)


# -- inter-channel noise of superposed attention ------------------------------


class FavorSBounds(NamedTuple):
    """The four tail bounds on inter-channel distortion of one key/query score."""

    markov_by_key: float
    markov_by_query: float
    chebyshev: float
    hoeffding: float

    @property
    def best(self) -> float:
        return min(self)


def _grid_pair(kbar, qbar, u: int, n: int):
    kbar = np.asarray(kbar, dtype=np.float64)
    qbar = np.asarray(qbar, dtype=np.float64)
    if kbar.ndim != 3 or kbar.shape != qbar.shape:
        raise ValueError("kbar and qbar must be matching (M, N, D) grids")
    m_rows, n_cols, _ = kbar.shape
    if not (0 <= u < m_rows and 0 <= n < n_cols):
        raise ValueError(f"channel ({u}, {n}) outside the {m_rows}x{n_cols} grid")
    signal = float(kbar[u, n] @ qbar[u, n])
    return kbar, qbar, signal


def favor_s_interference_bounds(kbar, qbar, u: int, n: int, alpha: float) -> FavorSBounds:
    """Tail bounds for the superposed score of channel ``(u, n)``.

    ``kbar[m, w]`` and ``qbar[m, w]`` are the unbound key and query of grid
    cell ``(m, w)`` at one fixed pair of sequence positions. The cross terms
    pair key cells ``(u, w)`` with query cells ``(t, n)``; for each such pair
    ``snr = alpha^2 <kbar[u,n], qbar[u,n]>^2 / |kbar[u,w] * qbar[t,n]|^2``.
    """
    _check_alpha(alpha, strict=True)
    kbar, qbar, signal = _grid_pair(kbar, qbar, u, n)
    m_rows, n_cols, _ = kbar.shape
    cross = m_rows * n_cols - 1
    if cross == 0:
        return FavorSBounds(0.0, 0.0, 0.0, 0.0)
    if signal == 0.0:
        raise ValueError("intended signal <kbar, qbar> is zero: distortion bound undefined")
    # inv_snr[w, t] = 1 / snr for key cell (u, w) and query cell (t, n)
    mass = np.einsum("wd,td->wt", kbar[u] ** 2, qbar[:, n] ** 2)
    inv_snr = mass / (alpha * alpha * signal * signal)
    inv_snr[n, u] = 0.0  # the intended (u, n) x (u, n) term
    off = np.ones_like(inv_snr, dtype=bool)
    off[n, u] = False

    by_key = float(np.sum(np.sqrt(inv_snr.sum(axis=1))))
    by_query = float(np.sum(np.sqrt(inv_snr.sum(axis=0))))
    chebyshev = float(inv_snr.sum())
    with np.errstate(divide="ignore"):
        snr = np.where(inv_snr[off] > 0, 1.0 / inv_snr[off], np.inf)
    hoeffding = float(2.0 * np.sum(np.exp(-snr / (2.0 * cross * cross))))
    return FavorSBounds(*(min(1.0, b) for b in (by_key, by_query, chebyshev, hoeffding)))


def estimate_favor_s_distortion(kbar, qbar, u: int, n: int, alpha: float, trials: int, seed: int) -> BoundReport:
    """Draw fresh bipolar cell keys per trial and count distortions of the superposed score."""
    _check_trials(trials)
    bounds = favor_s_interference_bounds(kbar, qbar, u, n, alpha)
    kbar, qbar, signal = _grid_pair(kbar, qbar, u, n)
    m_rows, n_cols, dim = kbar.shape
    hits = 0
    for c, t in _chunks(trials, m_rows * n_cols * dim):
        a = _rng.rademacher(_rng.stream(seed, c), (t, m_rows, n_cols, dim))
        k_sup = np.einsum("twd,wd->td", a[:, u], kbar[u])
        q_sup = np.einsum("tmd,md->td", a[:, :, n], qbar[:, n])
        score = np.einsum("td,td->t", k_sup, q_sup)
        hits += int(np.count_nonzero(np.abs(score - signal) > alpha * abs(signal)))
    return _report(bounds.best, hits, trials, seed, kind="favor_s", dim=dim, grid=[m_rows, n_cols],
                   channel=[u, n], alpha=alpha, bounds=list(bounds))


# -- norms of Hadamard products -----------------------------------------------


def _hadamard_sq_norms(dim: int, trials: int, seed: int) -> np.ndarray:
    x = _rng.unit_sphere(_rng.stream(seed, 0), dim)
    out = np.empty(trials)
    start = 0
    for c, n in _chunks(trials, dim):
        y = _rng.unit_sphere(_rng.stream(seed, 1, c), (n, dim))
        out[start:start + n] = np.sum((x * y) ** 2, axis=1)
        start += n
    return out


def hadamard_norm_stats(dim: int, trials: int, seed: int, beta: float = 1.0) -> tuple[float, float]:
    """Empirical ``E|X*Y|^2`` and ``P(|X*Y|^2 <= (1+beta)/D)`` for fixed unit X, uniform Y."""
    _check_trials(trials)
    if beta <= 0:
        raise ValueError("beta must be > 0")
    sq = _hadamard_sq_norms(dim, trials, seed)
    return float(sq.mean()), float(np.mean(sq <= (1.0 + beta) / dim))


def estimate_hadamard_markov(dim: int, beta: float, trials: int, seed: int) -> BoundReport:
    """Frequency of ``|X*Y|^2 > (1+beta)/D`` against the Markov bound ``1/(1+beta)``."""
    _check_trials(trials)
    if beta <= 0:
        raise ValueError("beta must be > 0")
    sq = _hadamard_sq_norms(dim, trials, seed)
    hits = int(np.count_nonzero(sq > (1.0 + beta) / dim))
    return _report(1.0 / (1.0 + beta), hits, trials, seed, kind="hadamard_markov", dim=dim, beta=beta,
                   mean_sq_norm=float(sq.mean()))


def sphere_grid(seed: int, rows: int, cols: int, dim: int, cos: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Unit key/query grids where each cell's query has cosine ``cos`` with its key.

    Used to sweep the inter-channel bounds over random but well-conditioned
    configurations.
    """
    if not -1.0 <= cos <= 1.0:
        raise ValueError("cos must lie in [-1, 1]")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    g = _rng.stream(seed, 0)
    k = _rng.unit_sphere(g, (rows, cols, dim))
    r = _rng.unit_sphere(g, (rows, cols, dim))
    r -= np.sum(r * k, axis=-1, keepdims=True) * k
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    q = cos * k + math.sqrt(1.0 - cos * cos) * r
    return k, q
