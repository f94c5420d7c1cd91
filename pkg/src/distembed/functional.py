"""Layer-level operations on HWC feature maps.

All spatial operations accept either a single map ``H x W x C`` or a batch
``N x H x W x C``.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, ContractError, GeometryError, ShapeError
from .tensor import Tensor, as_tensor

NORM_EPS = 1e-5


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected H x W x C or N x H x W x C, got {x.shape}")


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    if k <= 0 or s <= 0 or p < 0:
        raise GeometryError(f"invalid window: kernel {k}, stride {s}, padding {p}")
    if size + 2 * p < k:
        raise GeometryError(f"window {k} larger than padded extent {size + 2 * p}")
    return (size + 2 * p - k) // s + 1


def _window_slice(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def linear(x, weight, bias=None) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:  # single vector
        out = T.reshape(T.matmul(T.reshape(x, (1, x.shape[0])), weight), (as_tensor(weight).shape[1],))
    else:
        out = T.matmul(x, weight)
    return out if bias is None else out + bias


def conv1x1(x, weight, bias=None) -> Tensor:
    """Per-pixel linear map ``Cin -> Cout`` over the channel axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"conv1x1: input channels {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[1],):
        raise ShapeError(f"conv1x1: bias shape {as_tensor(bias).shape} vs {weight.shape[1]} outputs")
    return linear(x, weight, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Zero-padded ``kh x kw`` convolution; ``weight`` is ``kh x kw x Cin x Cout``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _as_batch(x)
    if weight.ndim != 4 or weight.shape[2] != xb.shape[-1]:
        raise ShapeError(f"conv2d: input {xb.shape} vs weight {weight.shape}")
    kh, kw, cin, cout = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, h, w, _ = xb.shape
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    xp = np.pad(xb.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    # im2col: one (N*Ho*Wo) x (kh*kw*Cin) matrix, row-major over (i, j, cin)
    cols = np.concatenate(
        [xp[:, _window_slice(i, sh, ho), _window_slice(j, sw, wo), :] for i, j in offsets], axis=-1
    ).reshape(-1, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        gx = gw = None
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        if xb.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for k, (i, j) in enumerate(offsets):
                gxp[:, _window_slice(i, sh, ho), _window_slice(j, sw, wo), :] += gcols[:, :, :, k, :]
            gx = gxp[:, ph : ph + h, pw : pw + w, :]
        return gx, gw

    result = Tensor._from_op(out, (xb, weight), backward)
    if bias is not None:
        result = result + bias
    return T.reshape(result, result.shape[1:]) if squeeze else result


def pool(kind: str, x, kernel=(2, 2), stride=None, padding=(0, 0)) -> Tensor:
    """Windowed per-channel reduction: ``kind`` is ``avg``, ``min`` or ``max``.

    Min/max pad with +/-inf so padded cells never win, and ties go to the first
    cell in row-major window order.  Average pooling divides by the number of
    real (unpadded) cells in each window.
    """
    if kind not in ("avg", "min", "max"):
        raise ContractError(f"unknown pool kind {kind!r}")
    x = as_tensor(x)
    xb, squeeze = _as_batch(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, h, w, c = xb.shape
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    pad = ((0, 0), (ph, ph), (pw, pw), (0, 0))

    if kind == "avg":
        xp = np.pad(xb.data, pad)
        counts = np.pad(np.ones((1, h, w, 1)), pad)
        total = np.zeros((n, ho, wo, c))
        cnt = np.zeros((1, ho, wo, 1))
        for i in range(kh):
            for j in range(kw):
                rs, cs = _window_slice(i, sh, ho), _window_slice(j, sw, wo)
                total += xp[:, rs, cs, :]
                cnt += counts[:, rs, cs, :]
        if np.any(cnt == 0):
            raise GeometryError("a pooling window covers only padding")
        out = total / cnt

        def backward(g):
            gxp = np.zeros_like(xp)
            gc = g / cnt
            for i in range(kh):
                for j in range(kw):
                    gxp[:, _window_slice(i, sh, ho), _window_slice(j, sw, wo), :] += gc
            return (gxp[:, ph : ph + h, pw : pw + w, :],)

    else:
        fill = -np.inf if kind == "max" else np.inf
        xp = np.pad(xb.data, pad, constant_values=fill)
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
        flat = win.reshape(n, ho, wo, c, kh * kw)
        idx = flat.argmax(axis=-1) if kind == "max" else flat.argmin(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if not np.all(np.isfinite(out)):
            raise GeometryError("a pooling window covers only padding")

        def backward(g):
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    hit = idx == i * kw + j
                    gxp[:, _window_slice(i, sh, ho), _window_slice(j, sw, wo), :] += g * hit
            return (gxp[:, ph : ph + h, pw : pw + w, :],)

    result = Tensor._from_op(out, (xb,), backward)
    return T.reshape(result, result.shape[1:]) if squeeze else result


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes: ``(..., H, W, C) -> (..., C)``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs (..., H, W, C), got {x.shape}")
    return T.mean(x, axis=(-3, -2))


def dropout(x, rate: float, mode: str = "train", seed: int = 0) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def affine_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Standardize each channel over the spatial axes of each sample, then scale and shift.

    Uses no running statistics, so eval output depends only on the sample itself.
    """
    x = as_tensor(x)
    mu = T.mean(x, axis=(-3, -2), keepdims=True)
    centered = x - mu
    var = T.mean(T.square(centered), axis=(-3, -2), keepdims=True)
    return centered / T.sqrt(var + eps) * gamma + beta
