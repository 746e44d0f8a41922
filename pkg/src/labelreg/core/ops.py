"""Differentiable layer operations on NCHW tensors.

Every op accepts an optional ``name`` (the layer path) that is quoted in
configuration errors, so a shape mismatch deep inside a network points at the
layer that caused it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DataError, EmptyLossSupportError
from .tensor import Tensor, as_tensor, make_output


def _where(name: str | None) -> str:
    return f" in layer {name!r}" if name else ""


def _require_rank4(x: Tensor, op: str, name: str | None) -> None:
    if x.data.ndim != 4:
        raise ConfigError(f"{op} expects an (n, c, h, w) tensor, got shape {x.shape}{_where(name)}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Columns laid out as (c*kh*kw, n*ho*wo); one block copy per kernel offset."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n = x.shape[0]
    oc, ic, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        ho, wo = x.shape[2:]
        cols = x.transpose(1, 0, 2, 3).reshape(ic, n * ho * wo)
    else:
        cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    y = w.reshape(oc, -1) @ cols
    y = np.ascontiguousarray(y.reshape(oc, n, ho, wo).transpose(1, 0, 2, 3))
    return y, cols


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, name: str | None = None) -> Tensor:
    """Cross-correlation with zero padding, as in every deep learning library."""
    _require_rank4(x, "conv2d", name)
    if weight.data.ndim != 4:
        raise ConfigError(f"conv2d weight must be (out_c, in_c, kh, kw), got {weight.shape}{_where(name)}")
    if stride <= 0 or padding < 0:
        raise ConfigError(f"conv2d needs stride > 0 and padding >= 0{_where(name)}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ConfigError(f"conv2d expected {ic} input channels, got {c}{_where(name)}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be empty ({ho}x{wo}) for input {h}x{w}{_where(name)}")
    if bias is not None and bias.shape != (oc,):
        raise ConfigError(f"conv2d bias must have shape ({oc},), got {bias.shape}{_where(name)}")

    y, cols = _conv_raw(x.data, weight.data, stride, padding)
    if bias is not None:
        y += bias.data.reshape(1, oc, 1, 1)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(oc, -1)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _conv_input_grad(g, weight.data, (h, w), stride, padding)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y, inputs, backward)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, hw: tuple[int, int], stride: int, padding: int):
    oc, ic, kh, kw = w.shape
    h, wd = hw
    if stride == 1 and kh == kw and padding <= kh - 1:
        # transposed conv == conv of the output grad with the flipped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv_raw(g, flipped, 1, kh - 1 - padding)
        return dx
    n, _, ho, wo = g.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(oc, -1)
    dcols = (w.reshape(oc, -1).T @ g2).reshape(ic, kh, kw, n, ho, wo)
    dxp = np.zeros((n, ic, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp[:, :, padding:padding + h, padding:padding + wd]


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def pool2d(x: Tensor, kind: str, k: int, stride: int | None = None, padding: int = 0,
           name: str | None = None) -> Tensor:
    """Windowed max or mean.

    Max-pool ties go to the first element in row-major window order. Average
    pooling counts zero padding in the denominator.
    """
    _require_rank4(x, "pool2d", name)
    stride = k if stride is None else stride
    if k <= 0 or stride <= 0 or padding < 0:
        raise ConfigError(f"pool2d needs k > 0, stride > 0, padding >= 0{_where(name)}")
    if kind not in ("max", "avg"):
        raise ConfigError(f"unknown pool kind {kind!r}{_where(name)}")
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigError(f"pool2d window {k} larger than input {h}x{w}{_where(name)}")
    if k == stride and padding == 0 and h % k == 0 and w % k == 0:
        return _pool_tiled(x, kind, k)
    return _pool_general(x, kind, k, stride, padding)


def _pool_tiled(x: Tensor, kind: str, k: int) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    if kind == "avg":
        y = blocks.mean(axis=-1)

        def backward(g):
            dx = np.broadcast_to((g / (k * k))[:, :, :, None, :, None], (n, c, ho, k, wo, k))
            return (dx.reshape(n, c, h, w),)
    else:
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            dblocks = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
            np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
            dx = dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (dx,)

    return make_output(np.ascontiguousarray(y), (x,), backward)


def _pool_general(x: Tensor, kind: str, k: int, stride: int, padding: int) -> Tensor:
    n, c, h, w = x.shape
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    if kind == "avg":
        y = flat.mean(axis=-1)

        def backward(g):
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            share = g / (k * k)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
            return (dxp[:, :, padding:padding + h, padding:padding + w],)
    else:
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (hp * wp)
        index = (plane + rows * wp + cols).ravel()

        def backward(g):
            dxp = np.bincount(index, weights=g.ravel(), minlength=n * c * hp * wp)
            dxp = dxp.astype(g.dtype).reshape(n, c, hp, wp)
            return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return make_output(np.ascontiguousarray(y), (x,), backward)


def upsample_nearest2x(x: Tensor, name: str | None = None) -> Tensor:
    _require_rank4(x, "upsample", name)
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_output(y, (x,), backward)


def bilinear_matrix(size_out: int, size_in: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights (size_out, size_in), half-pixel centres (align_corners=False)."""
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    m = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int], name: str | None = None) -> Tensor:
    _require_rank4(x, "upsample", name)
    n, c, h, w = x.shape
    ho, wo = size
    if ho < h or wo < w:
        raise ConfigError(f"bilinear upsample target {size} smaller than input {(h, w)}{_where(name)}")
    if (ho, wo) == (h, w):
        return make_output(x.data.copy(), (x,), lambda g: (g,))
    ah = bilinear_matrix(ho, h, x.dtype)
    aw = bilinear_matrix(wo, w, x.dtype)
    y = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return make_output(y, (x,), backward)


def upsample(x: Tensor, mode: str = "nearest2x", size: tuple[int, int] | None = None,
             name: str | None = None) -> Tensor:
    if mode == "nearest2x":
        return upsample_nearest2x(x, name)
    if mode == "bilinear":
        if size is None:
            raise ConfigError(f"bilinear upsample needs a target size{_where(name)}")
        return upsample_bilinear(x, size, name)
    raise ConfigError(f"unknown upsample mode {mode!r}{_where(name)}")


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def concat_channels(xs: Sequence[Tensor], name: str | None = None) -> Tensor:
    if not xs:
        raise ConfigError(f"concat_channels needs at least one tensor{_where(name)}")
    for t in xs:
        _require_rank4(t, "concat_channels", name)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ConfigError(f"concat_channels shape mismatch: {xs[0].shape} vs {t.shape}{_where(name)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    y = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_output(y, tuple(xs), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_output(x.data[:, start:stop].copy(), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch {a.shape} vs {b.shape}")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_output(x.data * x.dtype.type(factor), (x,), lambda g: (g * g.dtype.type(factor),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return make_output(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return make_output(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def check_label_ids(target: np.ndarray, num_classes: int, void_id: int) -> np.ndarray:
    """Return the non-void mask, raising on any id outside {0..K-1, void}."""
    target = np.asarray(target)
    valid = target != void_id
    bad = valid & ((target < 0) | (target >= num_classes))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label id {int(target[where])} at pixel {where} outside 0..{num_classes - 1} and not void")
    return valid


def softmax_ce_loss(logits: Tensor, target: np.ndarray, void_id: int = 255) -> Tensor:
    """Mean over non-void pixels of -log softmax(logits)[target]."""
    _require_rank4(logits, "softmax_ce_loss", None)
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ConfigError(f"target shape {target.shape} does not match logits {logits.shape}")
    valid = check_label_ids(target, k, void_id)
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossSupportError("empty loss support: every pixel is void")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sumexp)
    safe = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    value = -(picked * valid).sum(dtype=np.float64) / count

    def backward(g):
        grad = expz / sumexp
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        return (grad * (g / count).astype(z.dtype),)

    return make_output(np.asarray(value, dtype=z.dtype), (logits,), backward)


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared difference over unmasked elements.

    ``mask`` is either pred-shaped or a per-pixel (n, h, w) boolean that
    selects every channel at that pixel.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        keep = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == pred.shape:
            keep = mask
        elif pred.data.ndim == 4 and mask.shape == (pred.shape[0],) + pred.shape[2:]:
            keep = np.broadcast_to(mask[:, None], pred.shape)
        else:
            raise ConfigError(f"mse_loss mask shape {mask.shape} incompatible with {pred.shape}")
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossSupportError("empty loss support: every element is masked")
    masked = np.where(keep, diff, 0)
    value = (masked * masked).sum(dtype=np.float64) / count

    def backward(g):
        d = masked * (2 * g / count).astype(masked.dtype)
        return d, -d

    return make_output(np.asarray(value, dtype=pred.dtype), (pred, target), backward)
