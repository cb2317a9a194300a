"""Minimal CNN engine: layer definitions with their forward/backward passes, plus plain SGD.

Tensors are numpy arrays in NCHW layout. A model is a list of
:class:`LayerSpec` ending in ``softmax_xent`` plus a :data:`ParamStore`, a dict
keyed by ``(layer_index, slot)`` whose insertion order is the canonical
parameter order (ascending layer index, each weight before its bias).

Arithmetic follows the parameter dtype (float32 in training; the gradient
checks run in float64). Reductions over many terms accumulate in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArchitectureError, ConfigError, DataError

ParamStore = dict

KINDS = ("conv2d", "dense", "relu", "maxpool2d", "global_avg_pool", "residual_block", "softmax_xent")

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0  # dense: input features
    out_ch: int = 0  # dense: units
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "dense", "residual_block") and (self.in_ch < 1 or self.out_ch < 1):
            raise ArchitectureError(f"{self.kind}: channels/units must be >= 1")
        if self.kind in ("conv2d", "maxpool2d", "residual_block") and (self.kernel < 1 or self.stride < 1):
            raise ArchitectureError(f"{self.kind}: kernel and stride must be >= 1")
        if self.padding < 0:
            raise ArchitectureError("padding must be >= 0")
        if self.kind == "residual_block":
            if self.in_ch != self.out_ch or self.stride != 1 or self.kernel % 2 == 0:
                raise ArchitectureError("residual_block must preserve channels and spatial shape")

    def describe(self) -> str:
        """Canonical one-line rendering used for architecture digests."""
        if self.kind == "conv2d":
            return f"conv2d,in={self.in_ch},out={self.out_ch},k={self.kernel},s={self.stride},p={self.padding}"
        if self.kind == "dense":
            return f"dense,in={self.in_ch},out={self.out_ch}"
        if self.kind == "maxpool2d":
            return f"maxpool2d,k={self.kernel}"
        if self.kind == "residual_block":
            return f"residual_block,ch={self.in_ch},k={self.kernel}"
        return self.kind


def conv2d(cin, cout, kernel, stride=1, padding=0):
    return LayerSpec("conv2d", cin, cout, kernel, stride, padding)


def dense(in_features, units):
    return LayerSpec("dense", in_features, units)


def relu():
    return LayerSpec("relu")


def maxpool2d(kernel=2):
    return LayerSpec("maxpool2d", kernel=kernel, stride=kernel)


def global_avg_pool():
    return LayerSpec("global_avg_pool")


def residual_block(channels, kernel=3):
    return LayerSpec("residual_block", channels, channels, kernel, 1, kernel // 2)


def softmax_xent():
    return LayerSpec("softmax_xent")


# ---------------------------------------------------------------------------
# shapes and parameters
# ---------------------------------------------------------------------------


def infer_shapes(input_shape, layers) -> list[tuple]:
    """Per-sample output shape of every layer. Raises ArchitectureError on mismatch."""
    shape = tuple(input_shape)
    out = []
    if not layers or layers[-1].kind != "softmax_xent":
        raise ArchitectureError("model must end with softmax_xent")
    for i, ly in enumerate(layers):
        if ly.kind == "softmax_xent" and i != len(layers) - 1:
            raise ArchitectureError("softmax_xent must be the last layer")
        if ly.kind in ("conv2d", "residual_block"):
            if len(shape) != 3 or shape[0] != ly.in_ch:
                raise ArchitectureError(f"layer {i} ({ly.kind}) expects {ly.in_ch} channels, got shape {shape}")
            oh = kernels.conv_out_size(shape[1], ly.kernel, ly.stride, ly.padding)
            ow = kernels.conv_out_size(shape[2], ly.kernel, ly.stride, ly.padding)
            if oh < 1 or ow < 1:
                raise ArchitectureError(f"layer {i}: input {shape} too small for kernel {ly.kernel}")
            shape = (ly.out_ch, oh, ow)
        elif ly.kind == "maxpool2d":
            if len(shape) != 3 or shape[1] < ly.kernel or shape[2] < ly.kernel:
                raise ArchitectureError(f"layer {i}: cannot pool shape {shape}")
            shape = (shape[0], shape[1] // ly.kernel, shape[2] // ly.kernel)
        elif ly.kind == "global_avg_pool":
            if len(shape) != 3:
                raise ArchitectureError(f"layer {i}: global_avg_pool needs a CHW input")
            shape = (shape[0],)
        elif ly.kind == "dense":
            if int(np.prod(shape)) != ly.in_ch:
                raise ArchitectureError(f"layer {i}: dense expects {ly.in_ch} features, got {shape}")
            shape = (ly.out_ch,)
        elif ly.kind == "softmax_xent":
            if shape != (2,):
                raise ArchitectureError(f"classifier head must produce 2 logits, got {shape}")
        out.append(shape)
    return out


def param_shapes(layers) -> list[tuple[tuple[int, str], tuple, int, int]]:
    """``((layer, slot), shape, fan_in, fan_out)`` in canonical order."""
    res = []
    for i, ly in enumerate(layers):
        if ly.kind == "conv2d":
            k2 = ly.kernel * ly.kernel
            res.append(((i, "W"), (ly.out_ch, ly.in_ch, ly.kernel, ly.kernel), ly.in_ch * k2, ly.out_ch * k2))
            res.append(((i, "b"), (ly.out_ch,), ly.in_ch * k2, ly.out_ch * k2))
        elif ly.kind == "dense":
            res.append(((i, "W"), (ly.out_ch, ly.in_ch), ly.in_ch, ly.out_ch))
            res.append(((i, "b"), (ly.out_ch,), ly.in_ch, ly.out_ch))
        elif ly.kind == "residual_block":
            c, k = ly.in_ch, ly.kernel
            for j in ("1", "2"):
                res.append(((i, "W" + j), (c, c, k, k), c * k * k, c * k * k))
                res.append(((i, "b" + j), (c,), c * k * k, c * k * k))
    return res


def param_count(layers) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in param_shapes(layers))


def init_params(layers, seed: int, dtype=np.float32) -> ParamStore:
    """Weights ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)); biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape, fan_in, fan_out in param_shapes(layers):
        if key[1].startswith("W"):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[key] = rng.uniform(-a, a, size=shape).astype(dtype)
        else:
            params[key] = np.zeros(shape, dtype=dtype)
    return params


def check_structure(a: ParamStore, b: ParamStore) -> None:
    if list(a.keys()) != list(b.keys()):
        raise ArchitectureError("parameter stores have different slots")
    for key in a:
        if a[key].shape != b[key].shape:
            raise ArchitectureError(f"slot {key}: shape {a[key].shape} != {b[key].shape}")


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def _conv_fwd(x, W, b, k, s, p):
    n = x.shape[0]
    oh = kernels.conv_out_size(x.shape[2], k, s, p)
    ow = kernels.conv_out_size(x.shape[3], k, s, p)
    cols = kernels.im2col(x, k, s, p)
    wm = W.reshape(W.shape[0], -1)
    y = cols @ wm.T
    y += b
    y = y.reshape(n, oh, ow, W.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def _conv_bwd(dy, cache, W, k, s, p):
    cols, x_shape = cache
    cout = W.shape[0]
    d2 = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0, dtype=np.float64).astype(W.dtype)
    dcols = d2 @ W.reshape(cout, -1)
    dx = kernels.col2im(dcols, x_shape, k, s, p)
    return dx, dW, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(batch):
    if not isinstance(batch, np.ndarray) or batch.ndim != 4:
        raise ArchitectureError(f"batch must be an [N, C, H, W] array, got {getattr(batch, 'shape', type(batch))}")
    if batch.shape[0] < 1:
        raise DataError("empty batch")
    if not np.isfinite(batch).all():
        raise DataError("batch contains non-finite values")


def _layer_forward(ly, i, params, x):
    kind = ly.kind
    if kind == "conv2d":
        return _conv_fwd(x, params[i, "W"], params[i, "b"], ly.kernel, ly.stride, ly.padding)
    if kind == "dense":
        return x.reshape(x.shape[0], -1) @ params[i, "W"].T + params[i, "b"], x
    if kind == "relu":
        m = x > 0
        return x * m, m
    if kind == "maxpool2d":
        y, arg = kernels.maxpool_forward(x, ly.kernel)
        return y, (arg, x.shape)
    if kind == "global_avg_pool":
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype), x.shape
    if kind == "residual_block":
        k, p = ly.kernel, ly.padding
        h1, c1 = _conv_fwd(x, params[i, "W1"], params[i, "b1"], k, 1, p)
        m1 = h1 > 0
        h2, c2 = _conv_fwd(h1 * m1, params[i, "W2"], params[i, "b2"], k, 1, p)
        s = h2 + x
        m2 = s > 0
        return s * m2, (c1, m1, c2, m2)
    return x, None  # softmax_xent is applied by the loss


def forward(layers, params: ParamStore, batch: np.ndarray):
    """Run the network up to (not including) softmax_xent.

    Returns ``(logits [N, 2], cache)``; the cache feeds :func:`backward`.
    """
    _check_batch(batch)
    infer_shapes(batch.shape[1:], layers)
    x = batch
    cache = []
    for i, ly in enumerate(layers):
        x, c = _layer_forward(ly, i, params, x)
        cache.append(c)
    return x, cache


def backward(layers, params: ParamStore, cache, dlogits: np.ndarray):
    """Back-propagate d(loss)/d(logits).

    Returns ``(grads, dinput)`` where ``grads`` is ordered like ``params``.
    """
    grads = {}
    dx = dlogits
    for i in range(len(layers) - 1, -1, -1):
        ly, c = layers[i], cache[i]
        kind = ly.kind
        if kind == "conv2d":
            dx, grads[i, "W"], grads[i, "b"] = _conv_bwd(dx, c, params[i, "W"], ly.kernel, ly.stride, ly.padding)
        elif kind == "dense":
            x_flat = c.reshape(c.shape[0], -1)
            grads[i, "W"] = dx.T @ x_flat
            grads[i, "b"] = dx.sum(axis=0, dtype=np.float64).astype(dx.dtype)
            dx = (dx @ params[i, "W"]).reshape(c.shape)
        elif kind == "relu":
            dx = dx * c
        elif kind == "maxpool2d":
            arg, shape = c
            dx = kernels.maxpool_backward(dx, arg, shape, ly.kernel)
        elif kind == "global_avg_pool":
            n, ch, h, w = c
            dx = np.ascontiguousarray(np.broadcast_to((dx / (h * w))[:, :, None, None], c))
        elif kind == "residual_block":
            c1, m1, c2, m2 = c
            k, p = ly.kernel, ly.padding
            ds = dx * m2
            da1, grads[i, "W2"], grads[i, "b2"] = _conv_bwd(ds, c2, params[i, "W2"], k, 1, p)
            dx1, grads[i, "W1"], grads[i, "b1"] = _conv_bwd(da1 * m1, c1, params[i, "W1"], k, 1, p)
            dx = dx1 + ds
    return {key: grads[key] for key in params}, dx


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (free) or 1 (blocked)")
    return labels.astype(np.int64)


def xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return max(loss, 0.0), (d / n).astype(logits.dtype)


def loss_and_grads(layers, params: ParamStore, batch: np.ndarray, labels, with_input_grad: bool = False):
    """Mean cross-entropy loss and its gradient for every parameter slot."""
    _check_batch(batch)
    labels = _check_labels(labels, batch.shape[0])
    logits, cache = forward(layers, params, batch)
    loss, dlogits = xent(logits, labels)
    grads, dinput = backward(layers, params, cache, dlogits)
    if with_input_grad:
        return loss, grads, dinput
    return loss, grads


def global_norm(grads: ParamStore) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads.values()))


def clip_grad_norm(grads: ParamStore, max_norm: float) -> ParamStore:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``; ``max_norm <= 0`` disables."""
    if max_norm <= 0:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (g * g.dtype.type(scale)).astype(g.dtype) for k, g in grads.items()}


def sgd_step(params: ParamStore, grads: ParamStore, lr: float) -> ParamStore:
    """``p - lr * g`` slot by slot; returns a new store."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    check_structure(params, grads)
    if lr == 0:
        return {k: v.copy() for k, v in params.items()}
    return {k: (v - v.dtype.type(lr) * grads[k]).astype(v.dtype) for k, v in params.items()}
