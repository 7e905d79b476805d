"""Pure-numpy implementations of the hot kernels.

Semantics match ``_ckernels`` exactly; results agree to floating-point
summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_CHUNK = 256


def _pad(x, before, after):
    # numpy "symmetric" == half-sample reflection, repeated for wide pads
    return np.pad(x, ((0, 0), before, after, (0, 0)), mode="symmetric")


def median_filter(x, kh, kw):
    x = np.ascontiguousarray(x, dtype=np.float64)
    oh, ow = kh // 2, kw // 2
    out = np.empty_like(x)
    for start in range(0, x.shape[0], _CHUNK):
        xp = _pad(x[start:start + _CHUNK], (oh, kh - 1 - oh), (ow, kw - 1 - ow))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        out[start:start + _CHUNK] = np.median(win, axis=(-2, -1))
    return out


def nl_means(x, a, b, c):
    x = np.ascontiguousarray(x, dtype=np.float64)
    N, H, W, C = x.shape
    ha, hb = a // 2, b // 2
    pad = ha + hb + 1
    scale = 255.0 * 255.0 / (b * b * C) / (c * c)

    # count[r] = number of in-bounds patch centres covering r
    ones = np.pad(np.ones((H, W)), ((b - 1 - hb, hb), (b - 1 - hb, hb)))
    count = sliding_window_view(ones, (b, b)).sum(axis=(-2, -1))

    out = np.zeros_like(x)
    for n in range(N):
        xp = np.pad(x[n], ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")

        def view(oi, oj, h=H, w=W, src=xp):
            return src[pad + oi:pad + oi + h, pad + oj:pad + oj + w]

        weights = np.empty((a * a, H, W))
        for s in range(a * a):
            si, sj = divmod(s, a)
            di, dj = si - ha, sj - ha
            d = np.zeros((H, W))
            for u in range(b):
                for v in range(b):
                    diff = view(u - hb, v - hb) - view(di + u - hb, dj + v - hb)
                    d += np.einsum("ijc,ijc->ij", diff, diff)
            weights[s] = np.exp(-d * scale)
        weights /= weights.sum(axis=0)

        acc = np.zeros((H, W, C))
        for s in range(a * a):
            si, sj = divmod(s, a)
            wp = np.pad(weights[s], ((b - 1 - hb, hb), (b - 1 - hb, hb)))
            covered = sliding_window_view(wp, (b, b)).sum(axis=(-2, -1))
            acc += covered[:, :, None] * view(si - ha, sj - ha)
        out[n] = acc / count[:, :, None]
    return out


def saliency_pair(alpha, beta, domain, increase):
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sign = 1.0 if increase else -1.0
    sa = sign * (alpha[:, None] + alpha[None, :])
    sb = sign * (beta[:, None] + beta[None, :])
    dom = np.asarray(domain, dtype=bool)
    valid = (sa > 0) & (sb < 0) & np.triu(np.outer(dom, dom), k=1)
    if not valid.any():
        return -1, -1
    score = np.where(valid, -sa * sb, -1.0)
    flat = int(np.argmax(score))
    p, q = divmod(flat, alpha.shape[0])
    return p, q
