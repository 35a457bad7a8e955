"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Each function returns the same values as its compiled twin. Where a result
is a floating-point sum, contributions are accumulated in the same order so
the two backends agree bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, dilation, pad_h, pad_w, oh, ow):
    n, c, h, w = x.shape
    ext_h = dilation * (kh - 1) + 1
    ext_w = dilation * (kw - 1) + 1
    need_h = (oh - 1) * stride + ext_h
    need_w = (ow - 1) * stride + ext_w
    xp = np.zeros((n, c, max(need_h, h + pad_h), max(need_w, w + pad_w)), dtype=x.dtype)
    xp[:, :, pad_h:pad_h + h, pad_w:pad_w + w] = x
    xp = xp[:, :, :need_h, :need_w]
    win = sliding_window_view(xp, (ext_h, ext_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, dilation, pad_h, pad_w, oh, ow):
    blocks = cols.reshape(n, oh, ow, c, kh, kw)
    ext_h = (oh - 1) * stride + dilation * (kh - 1) + 1
    ext_w = (ow - 1) * stride + dilation * (kw - 1) + 1
    out = np.zeros((n, c, max(ext_h, h + pad_h), max(ext_w, w + pad_w)), dtype=cols.dtype)
    for ki in range(kh):
        y0 = ki * dilation
        for kj in range(kw):
            x0 = kj * dilation
            out[:, :, y0:y0 + stride * (oh - 1) + 1:stride, x0:x0 + stride * (ow - 1) + 1:stride] += (
                blocks[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(out[:, :, pad_h:pad_h + h, pad_w:pad_w + w])


def maxpool_forward(x, k, stride, pad, oh, ow):
    n, c, h, w = x.shape
    need_h = (oh - 1) * stride + k
    need_w = (ow - 1) * stride + k
    xp = np.full((n, c, max(need_h, h + pad), max(need_w, w + pad)), -np.inf, dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    xp = xp[:, :, :need_h, :need_w]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    pick = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, pick[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(pick, k)
    rows = np.arange(oh)[:, None] * stride - pad + ki
    cols = np.arange(ow)[None, :] * stride - pad + kj
    arg = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), np.ascontiguousarray(arg)


def maxpool_backward(grad, arg, h, w):
    n, c = grad.shape[:2]
    out = np.zeros((n * c, h * w), dtype=grad.dtype)
    g = grad.reshape(n * c, -1)
    a = arg.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), a.shape[1])
    np.add.at(out, (rows, a.ravel()), g.ravel())
    return out.reshape(n, c, h, w)


def disc_gather(image, radius, max_r):
    h, w, c = image.shape
    padded = np.zeros((h + 2 * max_r, w + 2 * max_r, c), dtype=np.float64)
    padded[max_r:max_r + h, max_r:max_r + w] = image
    inside = np.zeros((h + 2 * max_r, w + 2 * max_r), dtype=bool)
    inside[max_r:max_r + h, max_r:max_r + w] = True
    r2 = radius * radius
    acc = np.zeros((h, w, c), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for dy in range(-max_r, max_r + 1):
        for dx in range(-max_r, max_r + 1):
            d2 = dy * dy + dx * dx
            if d2 > max_r * max_r:
                continue
            ys = slice(max_r + dy, max_r + dy + h)
            xs = slice(max_r + dx, max_r + dx + w)
            take = inside[ys, xs] & (d2 <= r2)
            acc += np.where(take[..., None], padded[ys, xs], 0.0)
            count += take
    return acc / count[..., None]
