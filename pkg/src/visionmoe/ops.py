"""Neural-network primitives built on :mod:`visionmoe.tensor`.

Fused operations (layer norm, softmax, GELU, depthwise convolution) carry
hand-written backward rules; composite ones (linear, attention, cross
entropy) are assembled from tensor arithmetic.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import DimensionError, Tensor, as_tensor, matmul, tsum

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis; also serves as a 1x1 convolution."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
        y = y + b
    return y


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(xd * cdf, (x,), _bw, "gelu")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (logits,), _bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def _bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (logits,), _bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def _bw(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(xhat * gd + beta.data, (x, gamma, beta), _bw, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((x * x).sum(axis=-1, keepdims=True) + eps).sqrt()
    return x / norm


def _dwconv_cl(x: np.ndarray, K: np.ndarray, pad: int) -> np.ndarray:
    # x: [..., H, W, C] channels-last; K: [C, kh, kw]
    kh, kw = K.shape[1:]
    H, W = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + H, j:j + W, :] * K[:, i, j]
    return out


def depthwise_conv7x7(x: Tensor, K: Tensor, b: Tensor | None = None,
                      channels_last: bool = False) -> Tensor:
    """Per-channel 7x7 correlation with zero padding 3 (same-size output).

    ``x`` is ``[..., C, H, W]`` by default or ``[..., H, W, C]`` when
    ``channels_last`` is set. ``K`` is ``[C, 7, 7]``.
    """
    if K.ndim != 3 or K.shape[1:] != (7, 7):
        raise DimensionError(f"depthwise_conv7x7: kernel must be [C, 7, 7], got {K.shape}")
    C = K.shape[0]
    xd = x.data if channels_last else np.moveaxis(x.data, -3, -1)
    if xd.ndim < 3 or xd.shape[-1] != C:
        raise DimensionError(f"depthwise_conv7x7: channel mismatch between input {x.shape} and kernel {K.shape}")
    Kd = K.data
    out = _dwconv_cl(xd, Kd, 3)
    if b is not None:
        out = out + b.data
    H, W = xd.shape[-3], xd.shape[-2]

    def _bw(g):
        gc = g if channels_last else np.moveaxis(g, -3, -1)
        # correlation transpose = correlation with the flipped kernel
        gx = _dwconv_cl(gc, Kd[:, ::-1, ::-1], 3)
        widths = [(0, 0)] * (xd.ndim - 3) + [(3, 3), (3, 3), (0, 0)]
        xp = np.pad(xd, widths)
        red = tuple(range(gc.ndim - 1))
        gK = np.empty_like(Kd)
        for i in range(7):
            for j in range(7):
                gK[:, i, j] = (xp[..., i:i + H, j:j + W, :] * gc).sum(axis=red)
        if not channels_last:
            gx = np.moveaxis(gx, -1, -3)
        grads = [gx, gK]
        if b is not None:
            grads.append(gc.sum(axis=red))
        return tuple(grads)

    parents = (x, K) if b is None else (x, K, b)
    if not channels_last:
        out = np.moveaxis(out, -1, -3)
    return Tensor._make(np.ascontiguousarray(out), parents, _bw, "dwconv7x7")


def top_k(values, k: int):
    """Indices of the ``k`` largest entries along the last axis, descending.

    Ties go to the lowest index. Returns ``(indices, picked)`` where
    ``picked`` is a differentiable gather when ``values`` is a Tensor.
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=float)
    n = arr.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: k={k} must satisfy 1 <= k <= {n}")
    idx = np.argsort(-arr, axis=-1, kind="stable")[..., :k]
    if isinstance(values, Tensor):
        picked = gather_last(values, idx)
    else:
        picked = np.take_along_axis(arr, idx, axis=-1)
    return idx, picked


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last axis, differentiable in ``x``."""
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        _add_along(full, idx, g)
        return (full,)

    return Tensor._make(np.take_along_axis(x.data, idx, axis=-1), (x,), _bw, "gather")


def _add_along(full, idx, g):
    flat_full = full.reshape(-1, full.shape[-1])
    flat_idx = idx.reshape(-1, idx.shape[-1])
    rows = np.repeat(np.arange(flat_idx.shape[0]), flat_idx.shape[1])
    np.add.at(flat_full, (rows, flat_idx.ravel()), g.ravel())


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross entropy over the batch."""
    targets = np.asarray(targets, dtype=np.intp)
    B, C = logits.shape
    if targets.shape != (B,):
        raise DimensionError(f"cross_entropy: expected {B} targets, got shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= C):
        raise ValueError(f"cross_entropy: targets must lie in [0, {C})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("cross_entropy: smoothing must be in [0, 1)")
    q = np.full((B, C), smoothing / C, dtype=logits.data.dtype)
    q[np.arange(B), targets] += 1.0 - smoothing
    return -(tsum(log_softmax(logits) * q) * (1.0 / B))


def attention(x: Tensor, heads: int, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
              bq=None, bk=None, bv=None, bo=None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x[..., T, d]``."""
    d = x.shape[-1]
    if d % heads:
        raise DimensionError(f"attention: dim {d} not divisible by heads={heads}")
    dh = d // heads
    lead = x.shape[:-2]
    T = x.shape[-2]

    def split(t: Tensor) -> Tensor:
        nl = len(lead)
        t = t.reshape(*lead, T, heads, dh)
        return t.transpose(*range(nl), nl + 1, nl, nl + 2)

    q = split(linear(x, Wq, bq))
    k = split(linear(x, Wk, bk))
    v = split(linear(x, Wv, bv))
    nl = len(lead)
    kt = k.transpose(*range(nl + 1), nl + 2, nl + 1)
    weights = softmax(matmul(q, kt) * (1.0 / math.sqrt(dh)))
    ctx = matmul(weights, v).transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, T, d)
    return linear(ctx, Wo, bo)


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth on the leading axis; identity when ``rate`` is 0."""
    if rate <= 0.0 or rng is None:
        return x
    keep = 1.0 - rate
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep).astype(x.data.dtype) / keep
    return x * as_tensor(mask)
