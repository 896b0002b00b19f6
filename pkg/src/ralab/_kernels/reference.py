"""Pure-numpy kernels: convolution lowering and max pooling.

These are the fallback implementations; ralab._kernels picks the compiled
Cython variants when they are importable. Both backends must agree bit-for-bit
on float inputs (same arithmetic, same traversal order for ties).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(h, w, kh, kw, sh, sw):
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def im2col(x, kh, kw, sh, sw):
    """Lower (n,c,h,w) into patch rows of shape (n*oh*ow, c*kh*kw)."""
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, w, kh, kw, sh, sw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, sh, sw):
    """Adjoint of im2col: scatter-add patch rows back onto (n,c,h,w)."""
    oh, ow = conv_out_size(h, w, kh, kw, sh, sw)
    grid = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += grid[..., i, j]
    return out


def maxpool_forward(x, k, s):
    """Max pool (n,c,h,w) with a k*k window and stride s.

    Returns (out, argmax) where argmax holds, per output cell, the flat
    row*w+col position of the winning input pixel (first occurrence on ties).
    """
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, w, k, k, s, s)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(n, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    base_r = (np.arange(oh) * s)[:, None]
    base_c = (np.arange(ow) * s)[None, :]
    rows = base_r + local // k
    colsy = base_c + local % k
    argmax = (rows * w + colsy).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool_backward(grad_out, argmax, h, w):
    """Scatter pooled gradients back to the argmax positions."""
    n, c = grad_out.shape[:2]
    out = np.zeros((n, c, h * w), dtype=grad_out.dtype)
    np.add.at(
        out,
        (
            np.arange(n)[:, None, None, None],
            np.arange(c)[None, :, None, None],
            argmax,
        ),
        grad_out,
    )
    return out.reshape(n, c, h, w)
