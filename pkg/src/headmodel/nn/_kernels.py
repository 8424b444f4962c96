"""Direct 3x3 convolution kernels for large, few-channel planes.

``xp`` is the zero-padded input ``(B, Tx, C, H+2, W+2)`` with ``Tx`` either 1
(shared by all tracks) or equal to the weight track count.
"""
import numba as nb

_opts = {"nogil": True, "fastmath": True, "cache": True}


@nb.njit(**_opts)
def conv3x3_forward(xp, w, bias, out):
    B, Tx, C = xp.shape[0], xp.shape[1], xp.shape[2]
    H, W = out.shape[3], out.shape[4]
    T, F = w.shape[0], w.shape[1]
    for bi in range(B):
        for t in range(T):
            tx = t if Tx > 1 else 0
            for f in range(F):
                o = out[bi, t, f]
                o[:, :] = bias[t, f]
                for c in range(C):
                    x = xp[bi, tx, c]
                    for a in range(3):
                        for e in range(3):
                            wv = w[t, f, c, a, e]
                            for h in range(H):
                                for k in range(W):
                                    o[h, k] += wv * x[h + a, k + e]


@nb.njit(**_opts)
def conv3x3_backward(xp, w, dout, dw, dxp):
    """Fill ``dw`` and accumulate the padded input gradient into ``dxp``."""
    B, Tx, C = xp.shape[0], xp.shape[1], xp.shape[2]
    H, W = dout.shape[3], dout.shape[4]
    T, F = w.shape[0], w.shape[1]
    for t in range(T):
        tx = t if Tx > 1 else 0
        for f in range(F):
            for c in range(C):
                for a in range(3):
                    for e in range(3):
                        wv = w[t, f, c, a, e]
                        acc = 0.0
                        for bi in range(B):
                            d = dout[bi, t, f]
                            x = xp[bi, tx, c]
                            g = dxp[bi, tx, c]
                            for h in range(H):
                                for k in range(W):
                                    acc += d[h, k] * x[h + a, k + e]
                                    g[h + a, k + e] += wv * d[h, k]
                        dw[t, f, c, a, e] = acc
