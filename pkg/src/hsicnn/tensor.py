"""Raw array kernels: convolution, max pooling and channel concatenation.

Feature maps are ``H x W x C`` arrays, optionally with a leading batch axis
(``N x H x W x C``).  Filter sets are ``K x kh x kw x C``.  Every kernel is
stride 1 and returns a freshly allocated array.  Convolution is lowered to a
patch matrix and a BLAS matrix product, processed in blocks of output rows so
that whole-image inputs do not materialise one giant patch matrix.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError

# upper bound on patch-matrix elements built at once
_BLOCK_ELEMENTS = 1 << 23


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return x


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a H x W x C or N x H x W x C array, got shape {x.shape}")


def _unbatch(x, squeeze):
    return x[0] if squeeze else x


def pad_spatial(x, pad):
    """Zero-pad the two spatial axes of a (batched) feature map by ``pad`` per side."""
    if pad == 0:
        return x
    xb, squeeze = _as_batch(x)
    out = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return _unbatch(out, squeeze)


def conv2d_forward(input, filters, bias, pad=0):
    """Stride-1 convolution (cross-correlation) with zero padding.

    ``out[y, x, k] = bias[k] + sum_{dy, dx, c} filters[k, dy, dx, c] * xpad[y + dy, x + dx, c]``
    """
    x, squeeze = _as_batch(input)
    filters = np.asarray(filters)
    bias = np.asarray(bias)
    if filters.ndim != 4:
        raise ValueError(f"filters must be K x kh x kw x C, got shape {filters.shape}")
    k_out, kh, kw, c_in = filters.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[3] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[3]}, filters expect {c_in}")
    if bias.shape != (k_out,):
        raise ValueError(f"bias must have length {k_out}, got shape {bias.shape}")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    n, h, w, _ = x.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"{kh}x{kw} window larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    dtype = np.result_type(x.dtype, filters.dtype)
    # contiguous K x k_out operand: a transposed view takes an OpenBLAS path whose
    # rounding depends on the number of rows
    wmat = np.ascontiguousarray(filters.reshape(k_out, -1).T, dtype=dtype)
    out = np.empty((n, ho, wo, k_out), dtype=dtype)

    if kh == 1 and kw == 1 and pad == 0:
        out.reshape(-1, k_out)[...] = _rows_matmul(x.reshape(-1, c_in).astype(dtype, copy=False), wmat)
    else:
        xp = pad_spatial(x, pad)
        for i0, i1, y0, y1, cols in _patch_blocks(xp, kh, kw, ho, wo):
            out[i0:i1, y0:y1].reshape(-1, k_out)[...] = _rows_matmul(cols.astype(dtype, copy=False), wmat)
    out += bias.astype(dtype, copy=False)
    check_finite(out, "conv2d_forward")
    return _unbatch(out, squeeze)


def _rows_matmul(a, b):
    # numpy sends single-row products to gemv, whose summation order differs
    # from gemm; keeping every product on gemm makes each output row
    # independent of how many rows are computed together
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def _patch_blocks(xp, kh, kw, ho, wo):
    """Yield ``(i0, i1, y0, y1, cols)`` patch matrices covering the output.

    Small maps are grouped several batch items at a time; large maps are cut
    into bands of output rows.  Either way a block holds at most about
    ``_BLOCK_ELEMENTS`` values.
    """
    n, c = xp.shape[0], xp.shape[3]
    k = kh * kw * c
    per_item = ho * wo * k
    if per_item <= _BLOCK_ELEMENTS:
        items = max(1, _BLOCK_ELEMENTS // per_item)
        for i0 in range(0, n, items):
            i1 = min(n, i0 + items)
            win = sliding_window_view(xp[i0:i1], (kh, kw), axis=(1, 2))
            # (items, ho, wo, C, kh, kw) -> (items * ho * wo, kh * kw * C), the filter layout
            yield i0, i1, 0, ho, win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k)
        return
    rows = max(1, _BLOCK_ELEMENTS // (wo * k))
    for i in range(n):
        for y0 in range(0, ho, rows):
            y1 = min(ho, y0 + rows)
            win = sliding_window_view(xp[i, y0:y1 + kh - 1], (kh, kw), axis=(0, 1))
            yield i, i + 1, y0, y1, win.transpose(0, 1, 3, 4, 2).reshape(-1, k)


def conv2d_backward(input, filters, grad_out, pad=0):
    """Gradients of :func:`conv2d_forward` w.r.t. input, filters and bias."""
    x, squeeze = _as_batch(input)
    g, g_squeeze = _as_batch(grad_out)
    filters = np.asarray(filters)
    k_out, kh, kw, c_in = filters.shape
    n, h, w, c = x.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if c != c_in or g.shape != (n, ho, wo, k_out) or squeeze != g_squeeze:
        raise ValueError(
            f"shape mismatch: input {np.shape(input)}, filters {filters.shape}, grad_out {np.shape(grad_out)}"
        )
    dtype = np.result_type(x.dtype, filters.dtype, g.dtype)
    g2 = g.reshape(-1, k_out)
    grad_bias = g2.sum(axis=0)

    if kh == 1 and kw == 1 and pad == 0:
        grad_filters = (g2.T @ x.reshape(-1, c_in)).reshape(filters.shape)
        grad_input = (g2 @ filters.reshape(k_out, c_in)).reshape(x.shape)
    else:
        xp = pad_spatial(x, pad)
        gf = np.zeros((k_out, kh * kw * c_in), dtype=dtype)
        for i0, i1, y0, y1, cols in _patch_blocks(xp, kh, kw, ho, wo):
            gf += g[i0:i1, y0:y1].reshape(-1, k_out).T @ cols
        grad_filters = gf.reshape(filters.shape)

        gp = np.zeros((n, h + 2 * pad, w + 2 * pad, c_in), dtype=dtype)
        for dy in range(kh):
            for dx in range(kw):
                gp[:, dy:dy + ho, dx:dx + wo, :] += g @ filters[:, dy, dx, :]
        grad_input = gp[:, pad:pad + h, pad:pad + w, :] if pad else gp

    grad_input = np.ascontiguousarray(grad_input, dtype=dtype)
    for arr, name in ((grad_input, "grad_input"), (grad_filters, "grad_filters"), (grad_bias, "grad_bias")):
        check_finite(arr, f"conv2d_backward {name}")
    return _unbatch(grad_input, squeeze), grad_filters.astype(dtype, copy=False), grad_bias.astype(dtype, copy=False)


@dataclass
class PoolIndex:
    """Argmax bookkeeping for max pooling.

    ``flat`` has the pooled output's shape; each entry is ``y * W + x`` of the
    winning input cell in the same batch item and channel.
    """

    flat: np.ndarray
    input_shape: tuple
    window: int


def maxpool2d_forward(input, window):
    """Stride-1 max pooling without implicit padding.

    Ties go to the first cell of the window in row-major order.
    """
    x, squeeze = _as_batch(input)
    n, h, w, c = x.shape
    if window < 1 or window > h or window > w:
        raise ValueError(f"{window}x{window} pool window exceeds input {h}x{w}")
    ho, wo = h - window + 1, w - window + 1
    if window == 1:
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        flat = np.broadcast_to((yy * w + xx)[None, :, :, None], x.shape).copy()
        return _unbatch(x.copy(), squeeze), PoolIndex(_unbatch(flat, squeeze), np.shape(input), window)

    win = sliding_window_view(x, (window, window), axis=(1, 2))  # n, ho, wo, c, wy, wx
    win = win.reshape(n, ho, wo, c, window * window)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    dy, dx = np.divmod(arg, window)
    oy = np.arange(ho)[None, :, None, None]
    ox = np.arange(wo)[None, None, :, None]
    flat = (oy + dy) * w + (ox + dx)
    return _unbatch(np.ascontiguousarray(out), squeeze), PoolIndex(_unbatch(flat, squeeze), np.shape(input), window)


def maxpool2d_backward(grad_out, index, input_shape=None):
    """Route each output gradient to its argmax cell, accumulating overlaps."""
    input_shape = tuple(index.input_shape if input_shape is None else input_shape)
    g, squeeze = _as_batch(grad_out)
    flat, _ = _as_batch(index.flat)
    if len(input_shape) == 3:
        input_shape4 = (1,) + input_shape
    else:
        input_shape4 = input_shape
    n, h, w, c = input_shape4
    if flat.shape != g.shape or flat.shape[0] != n or flat.shape[3] != c:
        raise ValueError(f"grad_out shape {np.shape(grad_out)} does not match pool index {np.shape(index.flat)}")
    if flat.size and (flat.min() < 0 or flat.max() >= h * w):
        raise ValueError(f"pool index outside input shape {input_shape}")
    batch = np.arange(n).reshape(n, 1, 1, 1)
    chan = np.arange(c).reshape(1, 1, 1, c)
    target = ((batch * (h * w) + flat) * c + chan).ravel()
    acc = np.bincount(target, weights=g.ravel(), minlength=n * h * w * c)
    grad_input = acc.reshape(input_shape4).astype(g.dtype, copy=False)
    check_finite(grad_input, "maxpool2d_backward")
    return _unbatch(grad_input, squeeze)


def concat_channels(parts):
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    spatial = {tuple(np.shape(p)[:-1]) for p in parts}
    if len(spatial) != 1:
        raise ValueError(f"spatial extents differ: {sorted(spatial)}")
    return np.concatenate(parts, axis=-1)


def split_channels(x, sizes):
    """Inverse of :func:`concat_channels` for the given channel counts."""
    if sum(sizes) != np.shape(x)[-1]:
        raise ValueError(f"channel sizes {sizes} do not add up to {np.shape(x)[-1]}")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, bounds, axis=-1)]
