"""Pure-numpy reference kernels for same-padded stride-1 convolution.

Row ``b*H*W + y*W + x`` of the column matrix holds the zero-padded ``k x k``
window around ``(y, x)`` flattened channel-major as ``c*k*k + dy*k + dx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    b, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)


def col2im(cols, shape, k):
    b, c, h, w = shape
    if k == 1:
        return np.ascontiguousarray(cols.reshape(b, h, w, c).transpose(0, 3, 1, 2))
    p = k // 2
    c6 = cols.reshape(b, h, w, c, k, k)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    # accumulation order (dy, dx) is shared with the compiled kernel
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + h, dx:dx + w] += c6[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, p:p + h, p:p + w])
