"""Independent reference implementations used as test oracles.

Plain Python loops over numpy scalars of the same dtype as the code under
test, accumulating in the documented order (kernel row-major, input channel
innermost, bias last). Nothing here imports usgrip.
"""

import math

import numpy as np


def pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def naive_conv2d(x, w, b, padding="valid", stride=1):
    H, W, Ci = x.shape
    kh, kw, _, Co = w.shape
    t = x.dtype.type
    pt, pb = pad_amounts(H, kh, stride, padding)
    pl, pr = pad_amounts(W, kw, stride, padding)
    Hp, Wp = H + pt + pb, W + pl + pr

    def px(r, c, ch):
        r, c = r - pt, c - pl
        if 0 <= r < H and 0 <= c < W:
            return x[r, c, ch]
        return t(0)

    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.empty((Ho, Wo, Co), x.dtype)
    for i in range(Ho):
        for j in range(Wo):
            for o in range(Co):
                acc = t(0)
                for ki in range(kh):
                    for kj in range(kw):
                        for c in range(Ci):
                            acc = t(acc + t(px(i * stride + ki, j * stride + kj, c) * w[ki, kj, c, o]))
                out[i, j, o] = t(acc + b[o])
    return out


def naive_maxpool(x):
    H, W, C = x.shape
    out = np.empty((H // 2, W // 2, C), x.dtype)
    for i in range(H // 2):
        for j in range(W // 2):
            for c in range(C):
                out[i, j, c] = max(x[2 * i, 2 * j, c], x[2 * i, 2 * j + 1, c],
                                   x[2 * i + 1, 2 * j, c], x[2 * i + 1, 2 * j + 1, c])
    return out


def naive_dense(x, w, b):
    t = x.dtype.type
    out = np.empty(w.shape[1], x.dtype)
    for m in range(w.shape[1]):
        acc = t(0)
        for k in range(w.shape[0]):
            acc = t(acc + t(x[k] * w[k, m]))
        out[m] = t(acc + b[m])
    return out


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at float64 array x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def adam_reference(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a Python float, one step per gradient."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
    return w


def f16_reference(x):
    """binary16 round-to-nearest-even via struct's IEEE half packing, saturating at 65504."""
    import struct
    x = max(min(float(x), 65504.0), -65504.0)
    return struct.unpack("<e", struct.pack("<e", x))[0]
