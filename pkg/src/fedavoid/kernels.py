"""Hot inner loops of the CNN engine and the grid DDA ray caster.

Every kernel has a numba implementation and a numpy implementation with the
same signature. The public functions dispatch on :func:`fedavoid._accel.backend`.
The raycast fallback is the same Python source run without JIT.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import backend, njit


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im
#
# cols layout: rows are (n, oy, ox) in C order, columns are (c, ky, kx) in
# C order, so ``cols @ W.reshape(cout, -1).T`` is the convolution.
# ---------------------------------------------------------------------------


def _im2col_numpy(x, k, s, p):
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * oh : s, : s * ow : s]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)


def _col2im_numpy(cols, x_shape, k, s, p):
    n, c, h, w = x_shape
    oh, ow = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    d = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += d[:, :, i, j]
    if p:
        return dxp[:, :, p : p + h, p : p + w].copy()
    return dxp


@njit(cache=True)
def _im2col_nb(x, k, s, p):
    n, c, h, w = x.shape
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    cols = np.zeros((n * oh * ow, c * k * k), dtype=x.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for ky in range(k):
                        iy = oy * s + ky - p
                        if iy < 0 or iy >= h:
                            continue
                        base = (ch * k + ky) * k
                        for kx in range(k):
                            ix = ox * s + kx - p
                            if ix >= 0 and ix < w:
                                cols[row, base + kx] = x[b, ch, iy, ix]
    return cols


@njit(cache=True)
def _col2im_nb(cols, n, c, h, w, k, s, p):
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for ky in range(k):
                        iy = oy * s + ky - p
                        if iy < 0 or iy >= h:
                            continue
                        base = (ch * k + ky) * k
                        for kx in range(k):
                            ix = ox * s + kx - p
                            if ix >= 0 and ix < w:
                                dx[b, ch, iy, ix] += cols[row, base + kx]
    return dx


def im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    if backend() == "numba":
        return _im2col_nb(np.ascontiguousarray(x), k, s, p)
    return _im2col_numpy(x, k, s, p)


def col2im(cols: np.ndarray, x_shape, k: int, s: int, p: int) -> np.ndarray:
    if backend() == "numba":
        n, c, h, w = x_shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, s, p)
    return _col2im_numpy(cols, x_shape, k, s, p)


# ---------------------------------------------------------------------------
# max pooling, window == stride, trailing rows/cols dropped. The argmax is the
# flat index within the window; ties go to the first maximum.
# ---------------------------------------------------------------------------


def _maxpool_fwd_numpy(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    win = x[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_bwd_numpy(dout, arg, x_shape, k):
    n, c, h, w = x_shape
    oh, ow = h // k, w // k
    win = np.zeros((n, c, oh, ow, k * k), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, : oh * k, : ow * k] = (
        win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    )
    return dx


@njit(cache=True)
def _maxpool_fwd_nb(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[b, ch, oy * k, ox * k]
                    bi = 0
                    for ky in range(k):
                        for kx in range(k):
                            v = x[b, ch, oy * k + ky, ox * k + kx]
                            if v > best:
                                best = v
                                bi = ky * k + kx
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = bi
    return out, arg


@njit(cache=True)
def _maxpool_bwd_nb(dout, arg, n, c, h, w, k):
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = arg[b, ch, oy, ox]
                    dx[b, ch, oy * k + a // k, ox * k + a % k] = dout[b, ch, oy, ox]
    return dx


def maxpool_forward(x: np.ndarray, k: int):
    if backend() == "numba":
        return _maxpool_fwd_nb(np.ascontiguousarray(x), k)
    return _maxpool_fwd_numpy(x, k)


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, x_shape, k: int) -> np.ndarray:
    if backend() == "numba":
        n, c, h, w = x_shape
        return _maxpool_bwd_nb(np.ascontiguousarray(dout), arg, n, c, h, w, k)
    return _maxpool_bwd_numpy(dout, arg, x_shape, k)


# ---------------------------------------------------------------------------
# DDA ray casting over an occupancy grid indexed [row=y, col=x]; the grid
# origin is the (0, 0) corner. Cells outside the grid never register a hit.
# ---------------------------------------------------------------------------

MIN_RANGE = 1e-6


def _raycast_py(occ, x0, y0, angles, cell, max_range):
    rows, cols_ = occ.shape
    out = np.empty(angles.shape[0], dtype=np.float64)
    for i in range(angles.shape[0]):
        dx = math.cos(angles[i])
        dy = math.sin(angles[i])
        ix = int(math.floor(x0 / cell))
        iy = int(math.floor(y0 / cell))
        if dx > 0.0:
            step_x = 1
            t_max_x = ((ix + 1) * cell - x0) / dx
            t_dx = cell / dx
        elif dx < 0.0:
            step_x = -1
            t_max_x = (ix * cell - x0) / dx
            t_dx = -cell / dx
        else:
            step_x = 0
            t_max_x = math.inf
            t_dx = math.inf
        if dy > 0.0:
            step_y = 1
            t_max_y = ((iy + 1) * cell - y0) / dy
            t_dy = cell / dy
        elif dy < 0.0:
            step_y = -1
            t_max_y = (iy * cell - y0) / dy
            t_dy = -cell / dy
        else:
            step_y = 0
            t_max_y = math.inf
            t_dy = math.inf
        r = max_range
        while True:
            if t_max_x < t_max_y:
                t = t_max_x
                ix += step_x
                t_max_x += t_dx
            else:
                t = t_max_y
                iy += step_y
                t_max_y += t_dy
            if t >= max_range:
                break
            if ix < 0 or iy < 0 or ix >= cols_ or iy >= rows:
                break
            if occ[iy, ix]:
                r = max(t, MIN_RANGE)
                break
        out[i] = r
    return out


_raycast_nb = njit(cache=True)(_raycast_py)


def raycast_grid(occ: np.ndarray, x: float, y: float, angles: np.ndarray, cell: float, max_range: float) -> np.ndarray:
    """Distance along each absolute angle to the first occupied cell, capped at ``max_range``."""
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    occ = np.ascontiguousarray(occ, dtype=np.bool_)
    if backend() == "numba":
        return _raycast_nb(occ, float(x), float(y), angles, float(cell), float(max_range))
    return _raycast_py(occ, float(x), float(y), angles, float(cell), float(max_range))
