"""Toy task, combined loss, gradient checking, and the SGD loop for the conv network."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import rng as _rng
from .convnet import (
    ActKind,
    ConvNetParams,
    ForwardCache,
    InferenceMode,
    dynamic_partition,
    init_convnet,
    isometry_loss,
    isometry_loss_grad,
    mimoconv_backward,
    mimoconv_forward,
    mode_assignment,
    softmax_cross_entropy,
)
from .vsa import key_orthogonality_loss


@dataclass(frozen=True)
class SyntheticTask:
    """Classes are fixed 1x8x8 templates; samples add Gaussian pixel noise.

    Templates are orthogonalized and scaled to unit pixel variance, so at zero
    noise every pair of classes is separated by a hyperplane.
    """

    seed: int = 0
    num_classes: int = 4
    samples_per_class: int = 64
    sigma: float = 0.1
    shape: tuple = (1, 8, 8)

    def __post_init__(self):
        size = int(np.prod(self.shape))
        if self.num_classes < 2 or self.num_classes > size:
            raise ValueError(f"need 2..{size} classes")
        if self.samples_per_class < 1 or self.sigma < 0:
            raise ValueError("samples_per_class must be positive and sigma non-negative")

    def templates(self) -> np.ndarray:
        size = int(np.prod(self.shape))
        g = _rng.stream(self.seed, 0)
        q, _ = np.linalg.qr(g.standard_normal((size, self.num_classes)))
        return (q.T * math.sqrt(size)).reshape(self.num_classes, *self.shape)

    def sample(self, split: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Labelled set ``(x, y)``; split 0 is the training set, other splits are fresh draws."""
        g = _rng.stream(self.seed, 1, split)
        y = np.repeat(np.arange(self.num_classes), self.samples_per_class)
        y = y[g.permutation(y.size)]
        x = self.templates()[y] + self.sigma * g.standard_normal((y.size, *self.shape))
        return x, y


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 0.05
    gamma: float = 1e-4
    mu: float = 0.1
    channels: int = 2
    seed: int = 0
    sigma: float = 0.1
    classes: int = 4
    samples_per_class: int = 64
    dim: int = 64
    blocks: int = 3
    act: str = "prelu"
    fast_fraction: float = 1.0
    eval_every: int = 100

    def __post_init__(self):
        for name in ("steps", "batch", "channels", "classes", "samples_per_class", "dim", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.blocks < 0 or self.lr < 0 or self.gamma < 0 or self.mu < 0 or self.sigma < 0:
            raise ValueError("blocks, lr, gamma, mu and sigma must be non-negative")
        if not 0.0 <= self.fast_fraction <= 1.0:
            raise ValueError("fast_fraction must lie in [0, 1]")
        ActKind(self.act)

    def as_dict(self) -> dict:
        return asdict(self)

    def task(self) -> SyntheticTask:
        return SyntheticTask(self.seed, self.classes, self.samples_per_class, self.sigma)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


def loss_parts(logits, labels, params: ConvNetParams, config: TrainConfig) -> dict[str, float]:
    ce, _ = softmax_cross_entropy(logits, labels)
    iso = sum(isometry_loss(k, config.gamma) for k in params.conv_kernels())
    keys = key_orthogonality_loss(params.bind_keys, config.mu)
    return {"cross_entropy": ce, "isometry": iso, "keys": keys}


def total_loss(logits, labels, params: ConvNetParams, config: TrainConfig) -> float:
    """Mean cross-entropy over channels plus isometry penalties plus the key penalty.

    The key term is constant while keys are frozen but is still reported.
    """
    logits = np.asarray(logits)
    if logits.shape[0] != params.channels or np.shape(labels)[0] != params.channels:
        raise ValueError("logits and labels need one slice per channel")
    return sum(loss_parts(logits, labels, params, config).values())


def loss_and_grads(inputs, labels, params: ConvNetParams, config: TrainConfig) -> tuple[float, dict]:
    """Total loss and its gradient for every trainable tensor (bind keys are frozen)."""
    cache = ForwardCache(None, None)
    logits = mimoconv_forward(inputs, params, cache)
    if logits.shape[0] != np.shape(labels)[0]:
        raise ValueError("logits and labels need one slice per channel")
    loss, gl = softmax_cross_entropy(logits, labels)
    loss += key_orthogonality_loss(params.bind_keys, config.mu)
    grads = mimoconv_backward(cache, gl, params)
    names = ["first_conv"] + [f"trunk.{i}.kernel" for i in range(len(params.trunk))]
    for name, kernel in zip(names, params.conv_kernels()):
        iso, g = isometry_loss_grad(kernel, config.gamma)
        loss += iso
        grads[name] = grads[name] + g
    return loss, grads


# -- finite differences ---------------------------------------------------------------


def _tensor_refs(params: ConvNetParams) -> dict[str, np.ndarray]:
    """Live (mutable) references to every trainable tensor."""
    refs = {"first_conv": params.first_conv.W}
    for i, blk in enumerate(params.trunk):
        refs[f"trunk.{i}.kernel"] = blk.kernel.W
        refs[f"trunk.{i}.act_b"] = blk.act.b
    refs["classifier.W"] = params.classifier_W
    refs["classifier.b"] = params.classifier_b
    return refs


def _unbind_stack(params: ConvNetParams) -> np.ndarray:
    return np.stack([m.entries for m in params.unbind])


def kink_margin(inputs, params: ConvNetParams) -> float:
    """Smallest distance from any activation input to that activation's kink."""
    cache = ForwardCache(None, None)
    mimoconv_forward(inputs, params, cache)
    margin = math.inf
    for blk, (h, _) in zip(params.trunk, cache.trunk):
        if blk.act.kind is ActKind.SRELU:
            margin = min(margin, float(np.min(np.abs(h - blk.act.b[:, None, None]))))
        elif not (blk.act.kind is ActKind.PRELU and np.all(blk.act.b == 1.0)):
            margin = min(margin, float(np.min(np.abs(h))))
    return margin


def avoid_kinks(inputs, params: ConvNetParams, margin: float, seed: int, tries: int = 200) -> np.ndarray:
    """Redraw Gaussian inputs of the same shape until every pre-activation clears ``margin``."""
    x = np.asarray(inputs, dtype=np.float64)
    for t in range(tries):
        if kink_margin(x, params) > margin:
            return x
        x = _rng.stream(seed, 7, t).standard_normal(x.shape)
    raise RuntimeError(f"no kink-free input found in {tries} draws")


def grad_check(params: ConvNetParams, inputs, labels, config: TrainConfig, h: float = 1e-6,
               entries: int = 12, seed: int = 0, resample: bool = True) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per tensor.

    Relative error is ``|a - f| / max(|a|, |f|, 1e-8)``. At most ``entries``
    coordinates per tensor are probed, chosen on the seeded stream. With
    ``resample`` the inputs are first redrawn until no activation input lies
    within ``10 h`` of a kink.
    """
    params = params.copy()
    x = avoid_kinks(inputs, params, 10 * h, seed) if resample else np.asarray(inputs, dtype=np.float64)
    _, analytic = loss_and_grads(x, labels, params, config)
    g = _rng.stream(seed, 8)

    def f() -> float:
        return total_loss(mimoconv_forward(x, params), labels, params, config)

    report = {}
    targets = list(_tensor_refs(params).items())
    targets.append(("unbind", None))
    for name, arr in targets:
        if arr is None:
            flat_size = params.channels * params.unbind[0].dim ** 2
        else:
            flat_size = arr.size
        picks = g.choice(flat_size, size=min(entries, flat_size), replace=False)
        worst = 0.0
        for idx in picks:
            if arr is None:
                numeric = _probe_unbind(params, int(idx), h, f)
            else:
                pos = np.unravel_index(int(idx), arr.shape)
                orig = arr[pos]
                arr[pos] = orig + h
                up = f()
                arr[pos] = orig - h
                down = f()
                arr[pos] = orig
                numeric = (up - down) / (2 * h)
            a = float(analytic[name].reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        report[name] = worst
    return report


def _probe_unbind(params: ConvNetParams, idx: int, h: float, f: Callable[[], float]) -> float:
    from .vsa import UnbindMatrix

    stack = _unbind_stack(params)
    pos = np.unravel_index(idx, stack.shape)
    vals = []
    for delta in (h, -h):
        s = stack.copy()
        s[pos] += delta
        params.unbind = [UnbindMatrix(m) for m in s]
        vals.append(f())
    params.unbind = [UnbindMatrix(m) for m in stack]
    return (vals[0] - vals[1]) / (2 * h)


# -- training -----------------------------------------------------------------------------


def sgd_step(params: ConvNetParams, grads: dict, lr: float) -> None:
    """In-place plain SGD; pReLU parameters are projected back onto [-1, 1]."""
    from .vsa import UnbindMatrix

    for name, arr in _tensor_refs(params).items():
        arr -= lr * grads[name]
    params.unbind = [UnbindMatrix(m.entries - lr * g) for m, g in zip(params.unbind, grads["unbind"])]
    for blk in params.trunk:
        blk.act.clamp()


def channel_accuracy(params: ConvNetParams, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> list[float]:
    """Fast-mode accuracy per channel; channel ``i`` sees the set rotated by ``i * len / N``."""
    n = params.channels
    total = len(y)
    hits = np.zeros(n)
    shifts = [(i * total) // n for i in range(n)]
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        sel = [(idx + s) % total for s in shifts]
        logits = mimoconv_forward([x[s] for s in sel], params)
        for i in range(n):
            hits[i] += np.sum(np.argmax(logits[i], axis=-1) == y[sel[i]])
    return [float(h) / total for h in hits]


@dataclass
class TrainResult:
    params: ConvNetParams
    metrics: list
    config: TrainConfig


def train_toy(config: TrainConfig, metrics_path=None) -> TrainResult:
    """Plain SGD on the synthetic task.

    Each step draws one batch slice per channel. With probability
    ``fast_fraction`` the slices are independent (fast mode); otherwise one
    slice is replicated on every channel (slow mode). Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    task = config.task()
    x, y = task.sample(0)
    params = init_convnet(config.seed, config.channels, 1, config.dim, config.blocks, config.classes, act=config.act)
    g = _rng.stream(config.seed, 2)
    metrics = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(1, config.steps + 1):
            fast = g.random() < config.fast_fraction
            if fast:
                idx = [g.integers(0, len(y), config.batch) for _ in range(config.channels)]
            else:
                one = g.integers(0, len(y), config.batch)
                idx = [one] * config.channels
            loss, grads = loss_and_grads([x[i] for i in idx], np.stack([y[i] for i in idx]), params, config)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            sgd_step(params, grads, config.lr)
            if step % config.eval_every == 0 or step == config.steps:
                rec = {"step": step, "loss": loss, "accuracy": channel_accuracy(params, x, y), "seed": config.seed}
                metrics.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
    finally:
        if sink:
            sink.close()
    return TrainResult(params, metrics, config)


def dynamic_eval(params: ConvNetParams, task: SyntheticTask, modes=("fast", "normal", "slow"),
                 split: int = 1, chunk: int = 256) -> dict[str, float]:
    """Accuracy of one parameter set under each channel partition, on a fresh sample."""
    x, y = task.sample(split)
    out = {}
    for mode in modes:
        mode = InferenceMode(mode)
        assign = mode_assignment(mode, params.channels)
        n_in = max(assign) + 1
        hits = count = 0
        usable = (len(y) // n_in) * n_in
        for start in range(0, usable, chunk * n_in):
            stop = min(start + chunk * n_in, usable)
            groups = [np.arange(start + i, stop, n_in) for i in range(n_in)]
            logits = dynamic_partition([x[gi] for gi in groups], assign, params)
            for i, gi in enumerate(groups):
                hits += int(np.sum(np.argmax(logits[i], axis=-1) == y[gi]))
                count += len(gi)
        out[mode.value] = hits / count
    return out
