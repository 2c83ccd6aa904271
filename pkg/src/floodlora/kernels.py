"""2-D convolution kernels (cross-correlation, NCHW layout).

Three primitives cover both convolution and transposed convolution:

* ``conv_forward``         y = x (*) w
* ``conv_backward_input``  adjoint of ``conv_forward`` with respect to x
* ``conv_backward_weight`` adjoint of ``conv_forward`` with respect to w

A transposed convolution is ``conv_backward_input`` applied forwards, so its
own backward pass reuses ``conv_forward`` and ``conv_backward_weight``.

Each primitive lowers to im2col/col2im plus one BLAS contraction; the
gather/scatter loops have a numpy implementation and a numba one.
The public functions dispatch on :data:`floodlora._accel.HAS_NUMBA`; the
``*_numpy`` and ``*_numba`` variants stay importable for tests and benchmarks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import HAS_NUMBA, njit
from .errors import ConfigurationError


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv(x_shape, w_shape, stride, padding):
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")
    if x_shape[1] != w_shape[1]:
        raise ConfigurationError(
            f"input has {x_shape[1]} channels but kernel {tuple(w_shape)} expects {w_shape[1]}"
        )
    ho = conv_output_size(x_shape[2], w_shape[2], stride, padding)
    wo = conv_output_size(x_shape[3], w_shape[3], stride, padding)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"non-positive conv output extent {(ho, wo)} for input {tuple(x_shape)}, "
            f"kernel {tuple(w_shape[2:])}, stride {stride}, padding {padding}"
        )
    return ho, wo


# ---------------------------------------------------------------- shared GEMM stage
#
# Both backends lower convolution to a column matrix ``cols`` of shape
# ``[b*ho*wo, ci*kh*kw]`` and contract it with BLAS. They differ only in how
# ``cols`` is gathered (im2col) and scattered back (col2im).


def _forward_from_cols(cols, w, b, ho, wo):
    co = w.shape[0]
    out = cols @ w.reshape(co, -1).T  # [b*ho*wo, co]
    return np.ascontiguousarray(out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2))


def _grad_rows(g):
    b, co, ho, wo = g.shape
    return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)


# ---------------------------------------------------------------- numpy path


def _im2col_numpy(xp, kh, kw, stride, ho, wo):
    b, ci = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, ci * kh * kw)


def _col2im_numpy(cols, x_shape, kh, kw, stride, padding, ho, wo):
    b, ci, h, wd = x_shape
    dxp = np.zeros((b, ci, h + 2 * padding, wd + 2 * padding))
    c6 = cols.reshape(b, ho, wo, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)  # [b, ci, kh, kw, ho, wo]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += c6[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def conv_forward_numpy(x, w, stride, padding):
    ho, wo = _check_conv(x.shape, w.shape, stride, padding)
    cols = _im2col_numpy(_pad(x, padding), w.shape[2], w.shape[3], stride, ho, wo)
    return _forward_from_cols(cols, w, x.shape[0], ho, wo)


def conv_backward_input_numpy(g, w, x_shape, stride, padding):
    _, _, ho, wo = g.shape
    cols = _grad_rows(g) @ w.reshape(w.shape[0], -1)
    return _col2im_numpy(cols, x_shape, w.shape[2], w.shape[3], stride, padding, ho, wo)


def conv_backward_weight_numpy(x, g, w_shape, stride, padding):
    _, _, ho, wo = g.shape
    cols = _im2col_numpy(_pad(x, padding), w_shape[2], w_shape[3], stride, ho, wo)
    return np.ascontiguousarray((_grad_rows(g).T @ cols).reshape(w_shape))


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _im2col_loops(xp, kh, kw, stride, ho, wo):
    b, ci, _, _ = xp.shape
    cols = np.empty((b * ho * wo, ci * kh * kw))
    for n in range(b):
        for y in range(ho):
            for x in range(wo):
                r = (n * ho + y) * wo + x
                k = 0
                for c in range(ci):
                    for i in range(kh):
                        row = y * stride + i
                        for j in range(kw):
                            cols[r, k] = xp[n, c, row, x * stride + j]
                            k += 1
    return cols


@njit(cache=True)
def _col2im_loops(cols, b, ci, hp, wp, kh, kw, stride, ho, wo):
    dxp = np.zeros((b, ci, hp, wp))
    for n in range(b):
        for y in range(ho):
            for x in range(wo):
                r = (n * ho + y) * wo + x
                k = 0
                for c in range(ci):
                    for i in range(kh):
                        row = y * stride + i
                        for j in range(kw):
                            dxp[n, c, row, x * stride + j] += cols[r, k]
                            k += 1
    return dxp


# Direct loops beat im2col + GEMM when the channel product is tiny (e.g. the
# single-output fusion conv at full resolution).
_DIRECT_MAX_CHANNEL_PRODUCT = 64


@njit(cache=True)
def _direct_forward_loops(xp, w, stride, ho, wo):
    b, ci, _, _ = xp.shape
    co, _, kh, kw = w.shape
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            row = y * stride + i
                            for x in range(wo):
                                out[n, o, y, x] += wv * xp[n, c, row, x * stride + j]
    return out


@njit(cache=True)
def _direct_backward_input_loops(g, w, hp, wp, stride):
    b, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    dxp = np.zeros((b, ci, hp, wp))
    for n in range(b):
        for c in range(ci):
            for o in range(co):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            row = y * stride + i
                            for x in range(wo):
                                dxp[n, c, row, x * stride + j] += wv * g[n, o, y, x]
    return dxp


@njit(cache=True)
def _direct_backward_weight_loops(xp, g, kh, kw, stride):
    b, co, ho, wo = g.shape
    ci = xp.shape[1]
    dw = np.zeros((co, ci, kh, kw))
    for o in range(co):
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for y in range(ho):
                            row = y * stride + i
                            for x in range(wo):
                                acc += g[n, o, y, x] * xp[n, c, row, x * stride + j]
                    dw[o, c, i, j] = acc
    return dw


def _use_direct(w_shape) -> bool:
    return w_shape[0] * w_shape[1] <= _DIRECT_MAX_CHANNEL_PRODUCT


def conv_forward_numba(x, w, stride, padding):
    ho, wo = _check_conv(x.shape, w.shape, stride, padding)
    xp = np.ascontiguousarray(_pad(x, padding), dtype=np.float64)
    if _use_direct(w.shape):
        return _direct_forward_loops(xp, np.ascontiguousarray(w, dtype=np.float64), stride, ho, wo)
    cols = _im2col_loops(xp, int(w.shape[2]), int(w.shape[3]), stride, ho, wo)
    return _forward_from_cols(cols, w, x.shape[0], ho, wo)


def conv_backward_input_numba(g, w, x_shape, stride, padding):
    b, ci, h, wd = x_shape
    _, _, ho, wo = g.shape
    if _use_direct(w.shape):
        dxp = _direct_backward_input_loops(np.ascontiguousarray(g, dtype=np.float64),
                                           np.ascontiguousarray(w, dtype=np.float64),
                                           h + 2 * padding, wd + 2 * padding, stride)
        if padding:
            dxp = np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
        return dxp
    cols = np.ascontiguousarray(_grad_rows(g) @ w.reshape(w.shape[0], -1))
    dxp = _col2im_loops(cols, b, ci, h + 2 * padding, wd + 2 * padding, int(w.shape[2]), int(w.shape[3]),
                        stride, ho, wo)
    if padding:
        dxp = np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
    return dxp


def conv_backward_weight_numba(x, g, w_shape, stride, padding):
    _, _, ho, wo = g.shape
    xp = np.ascontiguousarray(_pad(x, padding), dtype=np.float64)
    if _use_direct(w_shape):
        return _direct_backward_weight_loops(xp, np.ascontiguousarray(g, dtype=np.float64),
                                             int(w_shape[2]), int(w_shape[3]), stride)
    cols = _im2col_loops(xp, int(w_shape[2]), int(w_shape[3]), stride, ho, wo)
    return np.ascontiguousarray((_grad_rows(g).T @ cols).reshape(w_shape))


# ---------------------------------------------------------------- dispatch

if HAS_NUMBA:
    conv_forward = conv_forward_numba
    conv_backward_input = conv_backward_input_numba
    conv_backward_weight = conv_backward_weight_numba
else:
    conv_forward = conv_forward_numpy
    conv_backward_input = conv_backward_input_numpy
    conv_backward_weight = conv_backward_weight_numpy


def deconv_forward(x, w, stride, padding, backend=None):
    """Transposed convolution. ``w`` has layout ``[c_in, c_out, kh, kw]``."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if x.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels but transposed kernel {tuple(w.shape)} expects {w.shape[0]}"
        )
    ho = deconv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = deconv_output_size(x.shape[3], w.shape[3], stride, padding)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"non-positive transposed-conv output extent {(ho, wo)}")
    out_shape = (x.shape[0], w.shape[1], ho, wo)
    fn = conv_backward_input if backend is None else backend
    return fn(x, w, out_shape, stride, padding)
