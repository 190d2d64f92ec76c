"""Numba kernels for tile-based splat compositing.

Both kernels walk 16x16 tiles in parallel. Each tile only writes its own
pixels (forward) or its own slice of the per-(tile, splat) gradient buffer
(backward), so results do not depend on the thread count.
"""

import math

import numba
import numpy as np

# TBB is the numba default when importable but the system copy is too old;
# the workqueue layer is always available and keeps results deterministic.
numba.config.THREADING_LAYER = "workqueue"
from numba import njit, prange

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99


# Packed per-pair record: mu_x, mu_y, conic a/b/c, opacity, r, g, b and the
# exponent below which the splat's alpha is under ALPHA_MIN.
PACK_WIDTH = 10


def pack_pairs(pair_splat, mu2d, conic, rgb, opacity):
    op = np.asarray(opacity, np.float64)[pair_splat]
    pk = np.empty((len(pair_splat), PACK_WIDTH))
    pk[:, 0:2] = mu2d[pair_splat]
    pk[:, 2:5] = conic[pair_splat]
    pk[:, 5] = op
    pk[:, 6:9] = rgb[pair_splat]
    with np.errstate(divide="ignore"):
        # nudged down so the shortcut never skips a splat the exact test keeps
        pk[:, 9] = np.where(op > 0, np.log(ALPHA_MIN / np.maximum(op, 1e-300)) - 1e-9, np.inf)
    return pk


@njit(parallel=True, cache=True)
def raster_forward(ranges, pk, height, width, tile, tiles_x, color, alpha):
    for t in prange(ranges.shape[0]):
        start = ranges[t, 0]
        end = ranges[t, 1]
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(start, end):
                    dx = px - pk[k, 0]
                    dy = py - pk[k, 1]
                    power = -0.5 * (pk[k, 2] * dx * dx + pk[k, 4] * dy * dy) - pk[k, 3] * dx * dy
                    if power < pk[k, 9]:
                        continue
                    a = pk[k, 5] * math.exp(power)
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    c0 += pk[k, 6] * w
                    c1 += pk[k, 7] * w
                    c2 += pk[k, 8] * w
                    T *= 1.0 - a
                color[py, px, 0] = c0
                color[py, px, 1] = c1
                color[py, px, 2] = c2
                alpha[py, px] = 1.0 - T


@njit(parallel=True, cache=True)
def raster_backward(ranges, pk, height, width, tile, tiles_x, d_color, d_alpha, out):
    """Per-pair gradients: [mu_x, mu_y, conic_a, conic_b, conic_c, r, g, b, opacity]."""
    for t in prange(ranges.shape[0]):
        start = ranges[t, 0]
        end = ranges[t, 1]
        n = end - start
        if n == 0:
            continue
        a_buf = np.empty(n)
        t_buf = np.empty(n)
        clamped = np.empty(n, dtype=np.bool_)
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                for k in range(n):
                    row = start + k
                    dx = px - pk[row, 0]
                    dy = py - pk[row, 1]
                    power = -0.5 * (pk[row, 2] * dx * dx + pk[row, 4] * dy * dy) \
                        - pk[row, 3] * dx * dy
                    clamped[k] = False
                    a_buf[k] = 0.0
                    t_buf[k] = T
                    if power < pk[row, 9]:
                        continue
                    a = pk[row, 5] * math.exp(power)
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped[k] = True
                    a_buf[k] = a
                    T *= 1.0 - a
                T_final = T
                g0 = d_color[py, px, 0]
                g1 = d_color[py, px, 1]
                g2 = d_color[py, px, 2]
                ga = d_alpha[py, px]
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                for k in range(n - 1, -1, -1):
                    a = a_buf[k]
                    if a == 0.0:
                        continue
                    row = start + k
                    Tk = t_buf[k]
                    w = a * Tk
                    out[row, 5] += g0 * w
                    out[row, 6] += g1 * w
                    out[row, 7] += g2 * w
                    inv = 1.0 / (1.0 - a)
                    da = (g0 * (pk[row, 6] * Tk - s0 * inv)
                          + g1 * (pk[row, 7] * Tk - s1 * inv)
                          + g2 * (pk[row, 8] * Tk - s2 * inv)
                          + ga * T_final * inv)
                    s0 += pk[row, 6] * w
                    s1 += pk[row, 7] * w
                    s2 += pk[row, 8] * w
                    if clamped[k]:
                        continue
                    dx = px - pk[row, 0]
                    dy = py - pk[row, 1]
                    out[row, 8] += da * a / pk[row, 5]
                    dp = da * a
                    out[row, 0] += dp * (pk[row, 2] * dx + pk[row, 3] * dy)
                    out[row, 1] += dp * (pk[row, 4] * dy + pk[row, 3] * dx)
                    out[row, 2] += dp * (-0.5 * dx * dx)
                    out[row, 3] += dp * (-dx * dy)
                    out[row, 4] += dp * (-0.5 * dy * dy)


@njit(cache=True)
def _corners(h, w, xv, yv):
    x = min(max(xv, 0.0), w - 1.0)
    y = min(max(yv, 0.0), h - 1.0)
    x0 = min(int(math.floor(x)), max(w - 2, 0))
    y0 = min(int(math.floor(y)), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    return x0, y0, x1, y1, x - x0, y - y0


@njit(cache=True)
def bilinear_forward(tex, xy, out):
    """Clamp-to-edge bilinear lookup of ``(M, 2)`` points into ``out (M, C)``."""
    h, w, c = tex.shape
    for m in range(xy.shape[0]):
        x0, y0, x1, y1, fx, fy = _corners(h, w, xy[m, 0], xy[m, 1])
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            out[m, k] = (tex[y0, x0, k] * w00 + tex[y0, x1, k] * w01
                         + tex[y1, x0, k] * w10 + tex[y1, x1, k] * w11)


@njit(cache=True)
def bilinear_backward(tex, xy, d_out, d_tex, d_xy, need_tex):
    """Serial scatter into ``d_tex`` (fixed order) plus per-point ``d_xy``."""
    h, w, c = tex.shape
    for m in range(xy.shape[0]):
        x0, y0, x1, y1, fx, fy = _corners(h, w, xy[m, 0], xy[m, 1])
        gx = 0.0
        gy = 0.0
        for k in range(c):
            g = d_out[m, k]
            if need_tex:
                d_tex[y0, x0, k] += g * (1 - fx) * (1 - fy)
                d_tex[y0, x1, k] += g * fx * (1 - fy)
                d_tex[y1, x0, k] += g * (1 - fx) * fy
                d_tex[y1, x1, k] += g * fx * fy
            t00 = tex[y0, x0, k]
            t01 = tex[y0, x1, k]
            t10 = tex[y1, x0, k]
            t11 = tex[y1, x1, k]
            gx += g * ((t01 - t00) * (1 - fy) + (t11 - t10) * fy)
            gy += g * ((t10 - t00) * (1 - fx) + (t11 - t01) * fx)
        inside_x = xy[m, 0] >= 0 and xy[m, 0] <= w - 1 and w > 1
        inside_y = xy[m, 1] >= 0 and xy[m, 1] <= h - 1 and h > 1
        d_xy[m, 0] = gx if inside_x else 0.0
        d_xy[m, 1] = gy if inside_y else 0.0


def set_threads(n):
    """Set the kernel thread count, capped at what numba was started with."""
    if n is None:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def get_threads():
    return numba.get_num_threads()


def max_threads():
    return numba.config.NUMBA_NUM_THREADS

