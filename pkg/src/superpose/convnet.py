"""A small convolutional network that classifies several images at once.

Each input goes through its own pass of a shared first convolution. Its
feature maps are then bound position-wise to a channel key, and the bound maps
are summed into one tensor. A residual trunk processes that superposition once.
After global average pooling, each channel is unbound with its own matrix and
classified by a shared dense layer.

Arrays are batched: images are ``(B, C, H, W)``, a set of channel inputs is
``(N, B, C, H, W)``. Gradients are written by hand for this operator set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .vsa import KeyKind, KeyVector, UnbindMatrix, circulant, gen_key


@dataclass
class ConvKernel:
    """Weights ``(C_out, C_in, k, k)`` with odd ``k``; padding is ``k // 2`` zeros."""

    W: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 4 or self.W.shape[2] != self.W.shape[3]:
            raise ValueError(f"kernel must be (C_out, C_in, k, k), got {self.W.shape}")
        if self.W.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("kernel entries must be finite")

    @property
    def c_out(self) -> int:
        return self.W.shape[0]

    @property
    def c_in(self) -> int:
        return self.W.shape[1]

    @property
    def k(self) -> int:
        return self.W.shape[2]


def dirac_kernel(channels: int, k: int = 3) -> ConvKernel:
    w = np.zeros((channels, channels, k, k))
    w[np.arange(channels), np.arange(channels), k // 2, k // 2] = 1.0
    return ConvKernel(w)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]  # (b, c, ho, wo, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _out_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def conv2d(x, kernel: ConvKernel) -> np.ndarray:
    """Zero-padded strided cross-correlation; accepts a single image or a batch."""
    x, single = _as_batch(x)
    if x.shape[1] != kernel.c_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.c_in}")
    k, st, p = kernel.k, kernel.stride, kernel.k // 2
    ho, wo = _out_size(x.shape[2], k, st), _out_size(x.shape[3], k, st)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = _im2col(xp, k, st, ho, wo) @ kernel.W.reshape(kernel.c_out, -1).T
    out = out.reshape(x.shape[0], ho, wo, kernel.c_out).transpose(0, 3, 1, 2)
    return out[0] if single else out


def conv2d_backward(x, kernel: ConvKernel, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(d input, d weights)`` of ``sum(grad_out * conv2d(x, kernel))``."""
    x, single = _as_batch(x)
    g, _ = _as_batch(grad_out)
    k, st, p = kernel.k, kernel.stride, kernel.k // 2
    b, c, h, w = x.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, kernel.c_out)
    gw = (g2.T @ _im2col(xp, k, st, ho, wo)).reshape(kernel.W.shape)
    gcols = (g2 @ kernel.W.reshape(kernel.c_out, -1)).reshape(b, ho, wo, c, k, k)
    gxp = np.zeros_like(xp)
    for s in range(k):
        for t in range(k):
            gxp[:, :, s:s + st * ho:st, t:t + st * wo:st] += gcols[..., s, t].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p:p + h, p:p + w]
    return (gx[0] if single else gx), gw


# -- activations ----------------------------------------------------------------


class ActKind(enum.Enum):
    RELU = "relu"
    PRELU = "prelu"
    SRELU = "srelu"


@dataclass
class ActivationParam:
    kind: ActKind
    b: np.ndarray

    def __post_init__(self):
        self.kind = ActKind(self.kind)
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))

    @classmethod
    def default(cls, kind, channels: int) -> "ActivationParam":
        kind = ActKind(kind)
        init = {ActKind.RELU: 0.0, ActKind.PRELU: 0.5, ActKind.SRELU: -1.0}[kind]
        return cls(kind, np.full(channels, init))

    def clamp(self) -> None:
        if self.kind is ActKind.PRELU:
            np.clip(self.b, -1.0, 1.0, out=self.b)


def _channel_b(x: np.ndarray, p: ActivationParam) -> np.ndarray:
    c = x.shape[-3] if x.ndim >= 3 else x.shape[-1]
    if p.b.shape[0] != c:
        raise ValueError(f"activation has {p.b.shape[0]} parameters for {c} feature maps")
    return p.b[:, None, None] if x.ndim >= 3 else p.b


def activation(x, p: ActivationParam) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if p.kind is ActKind.RELU:
        return np.maximum(x, 0.0)
    b = _channel_b(x, p)
    if p.kind is ActKind.PRELU:
        return np.maximum(x, 0.0) + b * np.minimum(x, 0.0)
    return np.maximum(x, b)


def activation_backward(x, p: ActivationParam, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(d input, d b)``; ``d b`` is zero for plain ReLU."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3) if x.ndim >= 3 else tuple(range(x.ndim - 1))
    if p.kind is ActKind.RELU:
        return g * (x > 0), np.zeros_like(p.b)
    b = _channel_b(x, p)
    if p.kind is ActKind.PRELU:
        gx = g * np.where(x > 0, 1.0, b)
        gb = np.sum(g * np.minimum(x, 0.0), axis=red)
        return gx, gb
    above = x > b
    return g * above, np.sum(g * ~above, axis=red)


# -- isometry regularizer ----------------------------------------------------------


def conv_self_correlation(W) -> np.ndarray:
    """``O[a, b, c, d] = sum_{r,s,t} Wpad[a, r, c+s, d+t] W[b, r, s, t]`` with ``k // 2`` zero padding."""
    W = W.W if isinstance(W, ConvKernel) else np.asarray(W, dtype=np.float64)
    c_out, _, k, _ = W.shape
    p = k // 2
    up = np.pad(W, ((0, 0), (0, 0), (p, p), (p, p)))
    vm = W.reshape(c_out, -1)
    out = np.empty((c_out, c_out, k, k))
    for c in range(k):
        for d in range(k):
            out[:, :, c, d] = up[:, :, c:c + k, d:d + k].reshape(c_out, -1) @ vm.T
    return out


def _isometry_target(c: int, k: int) -> np.ndarray:
    t = np.zeros((c, c, k, k))
    t[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    return t


def _oriented(W: np.ndarray) -> tuple[np.ndarray, bool]:
    # penalize the orientation with fewer rows, which can actually be orthonormal
    if W.shape[1] > W.shape[0]:
        return W, False
    return W.transpose(1, 0, 2, 3), True


def isometry_loss(W, gamma: float) -> float:
    """``gamma/2 * |Conv(V, V) - identity-at-center|_F^2`` with ``V`` oriented by channel counts."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    W = W.W if isinstance(W, ConvKernel) else np.asarray(W, dtype=np.float64)
    if gamma == 0:
        return 0.0
    v, _ = _oriented(W)
    diff = conv_self_correlation(v) - _isometry_target(v.shape[0], v.shape[2])
    return 0.5 * gamma * float(np.sum(diff * diff))


def isometry_loss_grad(W, gamma: float) -> tuple[float, np.ndarray]:
    W = W.W if isinstance(W, ConvKernel) else np.asarray(W, dtype=np.float64)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return 0.0, np.zeros_like(W)
    v, flipped = _oriented(W)
    c, _, k, _ = v.shape
    p = k // 2
    diff = conv_self_correlation(v) - _isometry_target(c, k)
    loss = 0.5 * gamma * float(np.sum(diff * diff))
    # (k, k, c, c) layout keeps each matmul operand contiguous so BLAS is used
    g = np.ascontiguousarray((gamma * diff).transpose(2, 3, 0, 1))
    up = np.pad(v, ((0, 0), (0, 0), (p, p), (p, p)))
    vm = v.reshape(c, -1)
    gv = np.zeros_like(vm)
    gup = np.zeros_like(up)
    for a in range(k):
        for d in range(k):
            win = up[:, :, a:a + k, d:d + k].reshape(c, -1)
            gv += g[a, d].T @ win
            gup[:, :, a:a + k, d:d + k] += (g[a, d] @ vm).reshape(c, -1, k, k)
    grad = gv.reshape(v.shape) + gup[:, :, p:p + k, p:p + k]
    return loss, (grad.transpose(1, 0, 2, 3) if flipped else grad)


# -- network --------------------------------------------------------------------------


@dataclass
class TrunkBlock:
    """``act -> conv``, with an identity skip when the shape is preserved."""

    kernel: ConvKernel
    act: ActivationParam

    @property
    def residual(self) -> bool:
        return self.kernel.c_in == self.kernel.c_out and self.kernel.stride == 1


@dataclass
class ConvNetParams:
    first_conv: ConvKernel
    trunk: list
    bind_keys: list
    unbind: list
    classifier_W: np.ndarray
    classifier_b: np.ndarray

    def __post_init__(self):
        d = self.first_conv.c_out
        if any(k.dim != d for k in self.bind_keys):
            raise ValueError("bind key dim must equal the first layer's output channels")
        if len(self.bind_keys) != len(self.unbind) or not self.bind_keys:
            raise ValueError("need one unbinding matrix per bind key")
        d_out = self.trunk[-1].kernel.c_out if self.trunk else d
        if any(m.dim != d_out for m in self.unbind):
            raise ValueError("unbinding dim must equal the trunk's output channels")
        if self.classifier_W.shape[0] != d_out or self.classifier_b.shape != (self.classifier_W.shape[1],):
            raise ValueError("classifier shape does not match the trunk output")

    @property
    def channels(self) -> int:
        return len(self.bind_keys)

    @property
    def classes(self) -> int:
        return self.classifier_W.shape[1]

    def conv_kernels(self) -> list[ConvKernel]:
        return [self.first_conv] + [blk.kernel for blk in self.trunk]

    def tensors(self) -> dict[str, np.ndarray]:
        """Every tensor in checkpoint order (see tensorio for the container)."""
        out = {"first_conv": self.first_conv.W}
        for i, blk in enumerate(self.trunk):
            out[f"trunk.{i}.kernel"] = blk.kernel.W
            out[f"trunk.{i}.act_b"] = blk.act.b
        out["bind_keys"] = np.stack([k.entries for k in self.bind_keys])
        out["unbind"] = np.stack([m.entries for m in self.unbind])
        out["classifier.W"] = self.classifier_W
        out["classifier.b"] = self.classifier_b
        return out

    def layout(self) -> dict:
        """Non-tensor structure needed to rebuild the parameters."""
        return {
            "first_stride": self.first_conv.stride,
            "trunk": [{"stride": b.kernel.stride, "act": b.act.kind.value} for b in self.trunk],
        }

    @classmethod
    def from_tensors(cls, tensors: dict, layout: dict) -> "ConvNetParams":
        trunk = [
            TrunkBlock(ConvKernel(tensors[f"trunk.{i}.kernel"], spec["stride"]),
                       ActivationParam(spec["act"], tensors[f"trunk.{i}.act_b"]))
            for i, spec in enumerate(layout["trunk"])
        ]
        return cls(
            ConvKernel(tensors["first_conv"], layout["first_stride"]),
            trunk,
            [KeyVector(k, KeyKind.GAUSSIAN) for k in tensors["bind_keys"]],
            [UnbindMatrix(m) for m in tensors["unbind"]],
            np.array(tensors["classifier.W"]),
            np.array(tensors["classifier.b"]),
        )

    def copy(self) -> "ConvNetParams":
        return ConvNetParams.from_tensors({k: np.array(v) for k, v in self.tensors().items()}, self.layout())


def init_convnet(seed: int, channels: int = 2, in_channels: int = 1, dim: int = 64, blocks: int = 3,
                 classes: int = 4, k: int = 3, act=ActKind.PRELU) -> ConvNetParams:
    """Random parameters: He-scaled first layer, small residual trunk, Gaussian bind keys.

    Unbinding matrices start as the transposed circulant of each key, the
    classic correlation unbinding, which the trunk's near-identity start
    keeps meaningful.
    """
    if min(channels, in_channels, dim, classes) < 1 or blocks < 0:
        raise ValueError("network sizes must be positive")
    g = _rng.stream(seed, 0)
    first = ConvKernel(g.standard_normal((dim, in_channels, k, k)) * math.sqrt(2.0 / (in_channels * k * k)))
    trunk = [
        TrunkBlock(ConvKernel(g.standard_normal((dim, dim, k, k)) * (0.5 / math.sqrt(dim * k * k))),
                   ActivationParam.default(act, dim))
        for _ in range(blocks)
    ]
    keys = [gen_key(seed, dim, KeyKind.GAUSSIAN, 1, i) for i in range(channels)]
    unbind = [UnbindMatrix(circulant(key).T) for key in keys]
    cw = g.standard_normal((dim, classes)) / math.sqrt(dim)
    return ConvNetParams(first, trunk, keys, unbind, cw, np.zeros(classes))


def _fiber_apply(mat: np.ndarray, z: np.ndarray) -> np.ndarray:
    b, c, h, w = z.shape
    return np.matmul(mat, z.reshape(b, c, h * w)).reshape(b, mat.shape[0], h, w)


def _bind(key: KeyVector, z: np.ndarray) -> np.ndarray:
    return _fiber_apply(circulant(key), z)


def _unbind_fiber_grad(key: KeyVector, g: np.ndarray) -> np.ndarray:
    return _fiber_apply(circulant(key).T, g)


def _trunk_forward(h: np.ndarray, params: ConvNetParams, cache: list | None) -> np.ndarray:
    for blk in params.trunk:
        a = activation(h, blk.act)
        c = conv2d(a, blk.kernel)
        if cache is not None:
            cache.append((h, a))
        h = h + c if blk.residual else c
    return h


def _trunk_backward(g: np.ndarray, params: ConvNetParams, cache: list, grads: dict) -> np.ndarray:
    for i in reversed(range(len(params.trunk))):
        blk = params.trunk[i]
        h, a = cache[i]
        ga, gw = conv2d_backward(a, blk.kernel, g)
        gh, gb = activation_backward(h, blk.act, ga)
        grads[f"trunk.{i}.kernel"] = gw
        grads[f"trunk.{i}.act_b"] = gb
        g = g + gh if blk.residual else gh
    return g


@dataclass
class ForwardCache:
    inputs: np.ndarray
    first: np.ndarray
    trunk: list = field(default_factory=list)
    trunk_out_shape: tuple = ()
    pooled: np.ndarray | None = None
    unbound: np.ndarray | None = None


def _stack_inputs(inputs, n: int) -> np.ndarray:
    if len(inputs) != n:
        raise ValueError(f"network has {n} channels but got {len(inputs)} inputs")
    arrs = [_as_batch(x)[0] for x in inputs]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("all channel inputs must share one shape")
    return np.stack(arrs)


def unbound_features(inputs, params: ConvNetParams, cache: ForwardCache | None = None) -> np.ndarray:
    """Per-channel pooled features after unbinding, ``(N, B, D_out)``."""
    x = _stack_inputs(inputs, params.channels)
    n, b = x.shape[:2]
    z = conv2d(x.reshape(n * b, *x.shape[2:]), params.first_conv)
    z = z.reshape(n, b, *z.shape[1:])
    s = sum(_bind(params.bind_keys[i], z[i]) for i in range(n))
    trunk_cache = [] if cache is not None else None
    h = _trunk_forward(s, params, trunk_cache)
    pooled = h.mean(axis=(2, 3))
    unbound = np.stack([pooled @ m.entries.T for m in params.unbind])
    if cache is not None:
        cache.inputs, cache.first = x, z
        cache.trunk, cache.trunk_out_shape = trunk_cache, h.shape
        cache.pooled, cache.unbound = pooled, unbound
    return unbound


def mimoconv_forward(inputs, params: ConvNetParams, cache: ForwardCache | None = None) -> np.ndarray:
    """Logits ``(N, B, classes)``, one slice per channel input."""
    u = unbound_features(inputs, params, cache)
    return u @ params.classifier_W + params.classifier_b


def mimoconv_backward(cache: ForwardCache, grad_logits, params: ConvNetParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_logits * logits)`` for every trainable tensor.

    Bind keys are frozen and receive no gradient.
    """
    gl = np.asarray(grad_logits, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    grads["classifier.W"] = np.einsum("nbd,nbc->dc", cache.unbound, gl)
    grads["classifier.b"] = gl.sum(axis=(0, 1))
    gu = gl @ params.classifier_W.T                                # (N, B, D_out)
    grads["unbind"] = np.einsum("nbi,bj->nij", gu, cache.pooled)
    gpool = sum(gu[i] @ params.unbind[i].entries for i in range(params.channels))
    _, _, hh, ww = cache.trunk_out_shape
    gh = np.broadcast_to((gpool / (hh * ww))[:, :, None, None], cache.trunk_out_shape).copy()
    gs = _trunk_backward(gh, params, cache.trunk, grads)
    n, b = cache.inputs.shape[:2]
    gz = np.concatenate([_unbind_fiber_grad(params.bind_keys[i], gs) for i in range(n)])
    x_flat = cache.inputs.reshape(n * b, *cache.inputs.shape[2:])
    _, grads["first_conv"] = conv2d_backward(x_flat, params.first_conv, gz)
    return grads


def plain_forward(x, params: ConvNetParams) -> np.ndarray:
    """The same layers without binding or unbinding, for a single input batch."""
    xb, single = _as_batch(x)
    h = _trunk_forward(conv2d(xb, params.first_conv), params, None)
    out = h.mean(axis=(2, 3)) @ params.classifier_W + params.classifier_b
    return out[0] if single else out


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all leading axes and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ValueError("labels must match the logits' leading shape")
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    count = y.size
    grad = np.exp(logp)
    np.put_along_axis(grad, y[..., None], np.take_along_axis(grad, y[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / count), grad / count


# -- dynamic inference -------------------------------------------------------------------


class InferenceMode(enum.Enum):
    FAST = "fast"
    NORMAL = "normal"
    SLOW = "slow"


def mode_assignment(mode, channels: int) -> list[int]:
    """Channel -> input index for a partition mode.

    Fast gives each channel its own input, slow replicates one input on all
    channels, normal puts each input on two neighbouring channels.
    """
    mode = InferenceMode(mode)
    if channels < 1:
        raise ValueError("channels must be positive")
    if mode is InferenceMode.FAST:
        return list(range(channels))
    if mode is InferenceMode.SLOW:
        return [0] * channels
    if channels % 2:
        raise ValueError("normal mode needs an even channel count")
    return [c // 2 for c in range(channels)]


def dynamic_partition(inputs, assignment, params: ConvNetParams) -> np.ndarray:
    """Run the inputs spread over channels and average each input's logits.

    Returns ``(len(inputs), B, classes)``.
    """
    assignment = list(assignment)
    if len(assignment) != params.channels:
        raise ValueError(f"assignment covers {len(assignment)} of {params.channels} channels")
    n_in = len(inputs)
    if any(not 0 <= a < n_in for a in assignment):
        raise ValueError("assignment refers to a missing input")
    if set(assignment) != set(range(n_in)):
        raise ValueError("every input needs at least one channel")
    logits = mimoconv_forward([inputs[a] for a in assignment], params)
    idx = np.asarray(assignment)
    return np.stack([logits[idx == i].mean(axis=0) for i in range(n_in)])
