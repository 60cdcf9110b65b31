"""Layer specifications, parameter initialization, and forward/backward kernels.

Convolution is im2col + matmul (see :func:`archscore.tensor.set_matmul_hook`
for swapping the inner product kernel).  All kernels return plain numpy
arrays; taping happens one level up in :mod:`archscore.network`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import ShapeError, matmul

CONV_KINDS = ("conv2d",)
POOL_KINDS = ("avgpool", "maxpool", "global_avgpool")
KINDS = ("conv2d", "linear", "batchnorm", "relu", "avgpool", "maxpool",
         "global_avgpool", "dropout", "softmax_xent", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters for one primitive layer.

    Only the fields relevant to ``kind`` are consulted.  ``identity`` is a
    wiring primitive used when assembling cell DAGs (a pure node sum); it
    is never counted as an operation type.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    affine: bool = True
    momentum: float = 0.1
    eps: float = 1e-5
    in_features: int = 0
    out_features: int = 0
    bias: bool = True
    p: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise ValueError(
                    f"conv2d channels ({self.in_channels}->{self.out_channels}) "
                    f"must be divisible by groups={self.groups}")

    def with_channels(self, cin: int, cout: int) -> "LayerSpec":
        return replace(self, in_channels=cin, out_channels=cout)


def init_params(layer: LayerSpec, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter arrays for one layer.

    Convolution and linear weights use kaiming-uniform with the usual
    sqrt(2) gain, i.e. U[-sqrt(6/fan_in), sqrt(6/fan_in)].
    """
    params: dict[str, np.ndarray] = {}
    if layer.kind == "conv2d":
        fan_in = (layer.in_channels // layer.groups) * layer.kernel * layer.kernel
        bound = np.sqrt(6.0 / fan_in)
        shape = (layer.out_channels, layer.in_channels // layer.groups,
                 layer.kernel, layer.kernel)
        params["weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    elif layer.kind == "linear":
        bound = np.sqrt(6.0 / layer.in_features)
        params["weight"] = rng.uniform(
            -bound, bound, size=(layer.out_features, layer.in_features)).astype(dtype)
        if layer.bias:
            b = 1.0 / np.sqrt(layer.in_features)
            params["bias"] = rng.uniform(-b, b, size=(layer.out_features,)).astype(dtype)
    elif layer.kind == "batchnorm":
        if layer.affine:
            params["gamma"] = np.ones(layer.in_channels, dtype=dtype)
            params["beta"] = np.zeros(layer.in_channels, dtype=dtype)
    return params


def init_buffers(layer: LayerSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    if layer.kind == "batchnorm":
        return {"running_mean": np.zeros(layer.in_channels, dtype=dtype),
                "running_var": np.ones(layer.in_channels, dtype=dtype)}
    return {}


def count_layer_params(layer: LayerSpec) -> int:
    if layer.kind == "conv2d":
        n = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel ** 2
        return n
    if layer.kind == "linear":
        n = layer.out_features * layer.in_features
        if layer.bias:
            n += layer.out_features
        return n
    if layer.kind == "batchnorm" and layer.affine:
        return 2 * layer.in_channels
    return 0


def count_layer_flops(layer: LayerSpec, h: int, w: int) -> int:
    """FLOPs under the fixed 2*MAC convention.

    Only multiply-accumulate layers (conv2d, linear) are counted; the
    convention's internal consistency is all the rankings need.
    ``h``/``w`` are the layer's *output* spatial dims.
    """
    if layer.kind == "conv2d":
        macs = (layer.out_channels * (layer.in_channels // layer.groups)
                * layer.kernel ** 2 * h * w)
        return 2 * macs
    if layer.kind == "linear":
        return 2 * layer.out_features * layer.in_features
    return 0


# --------------------------------------------------------------------------
# im2col machinery (index caches keyed by the full geometry tuple)

_COL_INDEX_CACHE: dict[tuple, tuple[np.ndarray, tuple]] = {}


def _col_indices(c: int, h: int, w: int, k: int, s: int, p: int):
    key = (c, h, w, k, s, p)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * p, w + 2 * p
    oh = (hp - k) // s + 1
    ow = (wp - k) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {k} too large for padded input {hp}x{wp}")
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    base = (ci * hp + ki) * wp + kj            # (C, k, k)
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    offset = (oi * s * wp + oj * s).reshape(-1)  # (L,)
    idx = base.reshape(-1, 1) + offset[None, :]  # (C*k*k, L)
    out = (idx, (hp, wp, oh, ow))
    _COL_INDEX_CACHE[key] = out
    return out


def _im2col(x: np.ndarray, k: int, s: int, p: int):
    n, c, h, w = x.shape
    idx, (hp, wp, oh, ow) = _col_indices(c, h, w, k, s, p)
    if p:
        xpad = np.zeros((n, c, hp, wp), dtype=x.dtype)
        xpad[:, :, p:p + h, p:p + w] = x
    else:
        xpad = x
    cols = xpad.reshape(n, -1)[:, idx]           # (N, C*k*k, L)
    return cols, (hp, wp, oh, ow)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, s: int, p: int) -> np.ndarray:
    n, c, h, w = x_shape
    idx, (hp, wp, _, _) = _col_indices(c, h, w, k, s, p)
    per = c * hp * wp
    flat_idx = (idx[None, :, :] + (np.arange(n) * per)[:, None, None]).reshape(-1)
    acc = np.bincount(flat_idx, weights=dcols.reshape(-1).astype(np.float64),
                      minlength=n * per)
    dxpad = acc.reshape(n, c, hp, wp)
    dx = dxpad[:, :, p:p + h, p:p + w] if p else dxpad
    return dx.astype(dcols.dtype)


# --------------------------------------------------------------------------
# kernels: each returns (out, ctx); the matching *_bwd consumes (g, ctx)

def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int):
    n, c, h, wd = x.shape
    co, cig, k, _ = w.shape
    if c != cig * groups:
        raise ShapeError(f"conv2d expects {cig * groups} input channels, got {c}")
    cols, (hp, wp, oh, ow) = _im2col(x, k, stride, padding)
    if groups == 1:
        wmat = w.reshape(co, -1)
        out = matmul(wmat[None, :, :], cols)           # (N, Co, L)
    else:
        cols_g = cols.reshape(n, groups, (c // groups) * k * k, -1)
        wmat = w.reshape(groups, co // groups, -1)
        out = matmul(wmat[None, :, :, :], cols_g)      # (N, g, Co/g, L)
        out = out.reshape(n, co, -1)
    out = out.reshape(n, co, oh, ow)
    return out, (x.shape, w.shape, cols, stride, padding, groups)


def conv2d_bwd(g: np.ndarray, w: np.ndarray, ctx):
    x_shape, w_shape, cols, stride, padding, groups = ctx
    n, c = x_shape[0], x_shape[1]
    co, cig, k, _ = w_shape
    gmat = g.reshape(n, co, -1)
    if groups == 1:
        dw = matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        dcols = matmul(w.reshape(co, -1).T[None, :, :], gmat)
    else:
        gg = gmat.reshape(n, groups, co // groups, -1)
        cols_g = cols.reshape(n, groups, (c // groups) * k * k, -1)
        wmat = w.reshape(groups, co // groups, -1)
        dw = matmul(gg, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w_shape)
        dcols = matmul(wmat.transpose(0, 2, 1)[None, :, :, :], gg)
        dcols = dcols.reshape(n, c * k * k, -1)
    dx = _col2im(dcols, x_shape, k, stride, padding)
    return dx, dw.astype(w.dtype)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    if x.ndim != 2:
        raise ShapeError(f"linear expects 2D input, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} features, got {x.shape[1]}")
    out = matmul(x, w.T)
    if b is not None:
        out = out + b
    return out, x


def linear_bwd(g: np.ndarray, w: np.ndarray, has_bias: bool, x: np.ndarray):
    dx = matmul(g, w)
    dw = matmul(g.T, x)
    db = g.sum(axis=0) if has_bias else None
    return dx, dw.astype(w.dtype), db


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm expects 2D or 4D input, got shape {x.shape}")


def _bn_expand(v: np.ndarray, ndim: int):
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def batchnorm_fwd(x, gamma, beta, running_mean, running_var, eps, momentum,
                  train: bool):
    """Normalize per channel; train mode also updates the running buffers
    in place (unbiased variance feeds the buffers, biased normalizes)."""
    axes = _bn_axes(x)
    if x.shape[1] != running_mean.shape[0]:
        raise ShapeError(f"batchnorm expects {running_mean.shape[0]} channels, "
                         f"got {x.shape[1]}")
    if train:
        mu = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        m = int(np.prod([x.shape[a] for a in axes]))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_expand(mu, x.ndim)) * _bn_expand(ivar, x.ndim)
    xhat = xhat.astype(x.dtype)
    out = xhat
    if gamma is not None:
        out = _bn_expand(gamma, x.ndim) * xhat + _bn_expand(beta, x.ndim)
    return out, (x, xhat, ivar, mu, train)


def batchnorm_bwd(g, gamma, ctx):
    x, xhat, ivar, mu, train = ctx
    ndim = x.ndim
    axes = _bn_axes(x)
    m = int(np.prod([x.shape[a] for a in axes]))
    if gamma is not None:
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        dxhat = g * _bn_expand(gamma, ndim)
    else:
        dgamma = dbeta = None
        dxhat = g
    iv = _bn_expand(ivar, ndim)
    if train:
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (dxhat - s1 / m - xhat * s2 / m) * iv
    else:
        dx = dxhat * iv
    return dx.astype(x.dtype), dgamma, dbeta


def relu_fwd(x):
    return np.maximum(x, 0), x


def relu_bwd(g, x):
    return g * (x > 0)


def avgpool_fwd(x, k, s, p):
    cols, (_, _, oh, ow) = _im2col(x, k, s, p)
    n, c = x.shape[0], x.shape[1]
    out = cols.reshape(n, c, k * k, -1).mean(axis=2).reshape(n, c, oh, ow)
    return out, (x.shape, k, s, p)


def avgpool_bwd(g, ctx):
    x_shape, k, s, p = ctx
    n, c = x_shape[0], x_shape[1]
    gg = np.broadcast_to(g.reshape(n, c, 1, -1) / (k * k),
                         (n, c, k * k, g.shape[2] * g.shape[3]))
    return _col2im(gg.reshape(n, c * k * k, -1), x_shape, k, s, p)


def maxpool_fwd(x, k, s, p):
    cols, (_, _, oh, ow) = _im2col(x, k, s, p)
    n, c = x.shape[0], x.shape[1]
    cg = cols.reshape(n, c, k * k, -1)
    arg = cg.argmax(axis=2)
    out = np.take_along_axis(cg, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out.reshape(n, c, oh, ow), (x.shape, k, s, p, arg)


def maxpool_bwd(g, ctx):
    x_shape, k, s, p, arg = ctx
    n, c = x_shape[0], x_shape[1]
    l = arg.shape[-1]
    dcols = np.zeros((n, c, k * k, l), dtype=g.dtype)
    np.put_along_axis(dcols, arg[:, :, None, :], g.reshape(n, c, 1, l), axis=2)
    return _col2im(dcols.reshape(n, c * k * k, l), x_shape, k, s, p)


def global_avgpool_fwd(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects 4D input, got shape {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_bwd(g, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(g[:, :, None, None] / (h * w), x_shape).astype(g.dtype)


def dropout_fwd(x, p, rng: np.random.Generator, train: bool):
    """Inverted dropout; the mask comes from the forward pass RNG."""
    if not train or p <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_bwd(g, mask):
    return g if mask is None else g * mask


def softmax_xent_fwd(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over the batch, accumulated in float64."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent expects 2D logits, got shape {logits.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    loss = np.array(nll.mean(dtype=np.float64), dtype=logits.dtype)
    return loss, (probs, labels, logits.dtype)


def softmax_xent_bwd(g, ctx):
    probs, labels, dtype = ctx
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (float(g) / n)).astype(dtype)
