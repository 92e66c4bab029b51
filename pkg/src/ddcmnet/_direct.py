"""Direct-loop convolution kernels for layers with few output channels.

Every output element is reduced over (input channel, kernel row, kernel
column) in that fixed order with a float64 accumulator.  Work is split over
(batch, channel) pairs only, so results do not depend on the thread count.
"""
import numpy as np
from numba import config, njit, prange, set_num_threads

config.THREADING_LAYER = "omp"


def set_threads(n: int) -> None:
    """Cap kernel threads; results are identical for any count."""
    set_num_threads(max(1, min(int(n), config.NUMBA_NUM_THREADS)))


@njit(parallel=True, cache=True)
def conv_forward(xp, w, out, r, s, groups):
    n, o_total, ho, wo = out.shape
    cg, k = w.shape[1], w.shape[2]
    og = o_total // groups
    for t in prange(n * o_total):
        b = t // o_total
        o = t % o_total
        base = (o // og) * cg
        acc = out[b, o]
        for c in range(cg):
            for i in range(k):
                for j in range(k):
                    wv = w[o, c, i, j]
                    off = j * r
                    for y in range(ho):
                        src = xp[b, base + c, y * s + i * r]
                        dst = acc[y]
                        if s == 1:
                            for x in range(wo):
                                dst[x] += wv * src[off + x]
                        else:
                            for x in range(wo):
                                dst[x] += wv * src[x * s + off]


@njit(parallel=True, cache=True)
def conv_grad_input(g, w, gxp, r, s, groups):
    n, o_total, ho, wo = g.shape
    c_total = gxp.shape[1]
    cg, k = w.shape[1], w.shape[2]
    og = o_total // groups
    for t in prange(n * c_total):
        b = t // c_total
        ci = t % c_total
        gi, c = ci // cg, ci % cg
        dst = gxp[b, ci]
        for o in range(gi * og, (gi + 1) * og):
            for i in range(k):
                for j in range(k):
                    wv = w[o, c, i, j]
                    off = j * r
                    for y in range(ho):
                        row = dst[y * s + i * r]
                        src = g[b, o, y]
                        if s == 1:
                            for x in range(wo):
                                row[off + x] += wv * src[x]
                        else:
                            for x in range(wo):
                                row[x * s + off] += wv * src[x]


@njit(parallel=True, cache=True)
def conv_grad_weight(g, xp, gw, r, s, groups):
    n, o_total, ho, wo = g.shape
    cg, k = gw.shape[1], gw.shape[2]
    og = o_total // groups
    for o in prange(o_total):
        base = (o // og) * cg
        part = np.empty(wo)
        for c in range(cg):
            for i in range(k):
                for j in range(k):
                    part[:] = 0.0
                    off = j * r
                    for b in range(n):
                        for y in range(ho):
                            src = xp[b, base + c, y * s + i * r]
                            gr = g[b, o, y]
                            if s == 1:
                                for x in range(wo):
                                    part[x] += gr[x] * src[off + x]
                            else:
                                for x in range(wo):
                                    part[x] += gr[x] * src[x * s + off]
                    total = 0.0
                    for x in range(wo):
                        total += part[x]
                    gw[o, c, i, j] = total
