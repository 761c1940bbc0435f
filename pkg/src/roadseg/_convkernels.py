"""Numba kernels for the 3x3 and 1x1 convolution layers (NCHW layout).

Every kernel writes each output element from exactly one thread with a
fixed sequential accumulation order, so results are bit-identical across
runs regardless of thread count. ``parallel=True`` uses numba's static
scheduling; ``fastmath`` only fixes the (deterministic) instruction
selection at compile time.
"""

from numba import config, njit, prange

# OpenMP threading layer: static scheduling, and skips the TBB probe (the
# sandbox TBB is too old, which would only produce a warning and a fallback).
config.THREADING_LAYER = "omp"


@njit(parallel=True, fastmath=True, cache=True)
def conv3_forward(xp, w, bias, stride, out):
    """xp (B,C,Hp,Wp) padded input, w (F,C,3,3) -> out (B,F,Ho,Wo)."""
    B, C, Hp, Wp = xp.shape
    F = w.shape[0]
    Ho, Wo = out.shape[2], out.shape[3]
    for bf in prange(B * F):
        b = bf // F
        f = bf % F
        for ho in range(Ho):
            acc = out[b, f, ho]
            for wo in range(Wo):
                acc[wo] = bias[f]
            hbase = ho * stride
            for c in range(C):
                for i in range(3):
                    xrow = xp[b, c, hbase + i]
                    w0 = w[f, c, i, 0]
                    w1 = w[f, c, i, 1]
                    w2 = w[f, c, i, 2]
                    if stride == 1:
                        for wo in range(Wo):
                            acc[wo] += w0 * xrow[wo] + w1 * xrow[wo + 1] + w2 * xrow[wo + 2]
                    else:
                        for wo in range(Wo):
                            k = 2 * wo
                            acc[wo] += w0 * xrow[k] + w1 * xrow[k + 1] + w2 * xrow[k + 2]


@njit(parallel=True, fastmath=True, cache=True)
def conv3_grad_w(xp, dy, stride, dw):
    """Weight gradient: dw (F,C,3,3) from padded input and output gradient."""
    B, C, Hp, Wp = xp.shape
    F, Ho, Wo = dy.shape[1], dy.shape[2], dy.shape[3]
    zero = xp[0, 0, 0, 0] * 0  # dtype-matched accumulator seed
    for fc in prange(F * C):
        f = fc // C
        c = fc % C
        for i in range(3):
            for j in range(3):
                total = zero
                for b in range(B):
                    for ho in range(Ho):
                        dyrow = dy[b, f, ho]
                        xrow = xp[b, c, ho * stride + i]
                        s = zero
                        if stride == 1:
                            for wo in range(Wo):
                                s += dyrow[wo] * xrow[wo + j]
                        else:
                            for wo in range(Wo):
                                s += dyrow[wo] * xrow[2 * wo + j]
                        total += s
                dw[f, c, i, j] = total


@njit(parallel=True, fastmath=True, cache=True)
def conv3_grad_x(dy, w, stride, dxp):
    """Input gradient scattered into the padded buffer dxp (B,C,Hp,Wp)."""
    B, F, Ho, Wo = dy.shape
    C = w.shape[1]
    Hp, Wp = dxp.shape[2], dxp.shape[3]
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        plane = dxp[b, c]
        for y in range(Hp):
            row = plane[y]
            for x in range(Wp):
                row[x] = 0.0
        for f in range(F):
            for ho in range(Ho):
                dyrow = dy[b, f, ho]
                hbase = ho * stride
                for i in range(3):
                    drow = plane[hbase + i]
                    w0 = w[f, c, i, 0]
                    w1 = w[f, c, i, 1]
                    w2 = w[f, c, i, 2]
                    if stride == 1:
                        for wo in range(Wo):
                            g = dyrow[wo]
                            drow[wo] += w0 * g
                            drow[wo + 1] += w1 * g
                            drow[wo + 2] += w2 * g
                    else:
                        for wo in range(Wo):
                            g = dyrow[wo]
                            k = 2 * wo
                            drow[k] += w0 * g
                            drow[k + 1] += w1 * g
                            drow[k + 2] += w2 * g


@njit(parallel=True, fastmath=True, cache=True)
def conv1_forward(x, w, bias, out):
    """1x1 convolution: x (B,C,H,W), w (F,C) -> out (B,F,H,W)."""
    B, C, H, W = x.shape
    F = w.shape[0]
    for bf in prange(B * F):
        b = bf // F
        f = bf % F
        for h in range(H):
            acc = out[b, f, h]
            for wo in range(W):
                acc[wo] = bias[f]
            for c in range(C):
                wv = w[f, c]
                xrow = x[b, c, h]
                for wo in range(W):
                    acc[wo] += wv * xrow[wo]


@njit(parallel=True, fastmath=True, cache=True)
def conv1_grad_w(x, dy, dw):
    B, C, H, W = x.shape
    F = dy.shape[1]
    zero = x[0, 0, 0, 0] * 0  # dtype-matched accumulator seed
    for fc in prange(F * C):
        f = fc // C
        c = fc % C
        total = zero
        for b in range(B):
            for h in range(H):
                xrow = x[b, c, h]
                dyrow = dy[b, f, h]
                s = zero
                for wo in range(W):
                    s += xrow[wo] * dyrow[wo]
                total += s
        dw[f, c] = total


@njit(parallel=True, fastmath=True, cache=True)
def conv1_grad_x(dy, w, dx):
    B, F, H, W = dy.shape
    C = w.shape[1]
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for h in range(H):
            acc = dx[b, c, h]
            for wo in range(W):
                acc[wo] = 0.0
            for f in range(F):
                wv = w[f, c]
                dyrow = dy[b, f, h]
                for wo in range(W):
                    acc[wo] += wv * dyrow[wo]
