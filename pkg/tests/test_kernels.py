"""Backend parity and correctness of the convolution/pooling kernels."""

import numpy as np
import pytest

from ralab import _kernels
from ralab._kernels import reference

SHAPES = [
    (2, 1, 8, 8, 3, 3, 1),
    (1, 3, 10, 7, 3, 2, 1),
    (3, 2, 9, 9, 4, 4, 2),
    (1, 1, 5, 5, 5, 5, 1),
]


def _naive_im2col(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
    row = 0
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[row, col] = x[b, ci, oy * sh + i, ox * sw + j]
                            col += 1
                row += 1
    return out


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", SHAPES)
def test_im2col_matches_naive(shape, dtype):
    n, c, h, w, kh, kw, s = shape
    x = np.random.default_rng(0).normal(size=(n, c, h, w)).astype(dtype)
    got = reference.im2col(x, kh, kw, s, s)
    np.testing.assert_array_equal(got, _naive_im2col(x, kh, kw, s, s))


@pytest.mark.parametrize("shape", SHAPES)
def test_col2im_is_adjoint_of_im2col(shape):
    # dot-product test: <im2col(x), g> == <x, col2im(g)>
    n, c, h, w, kh, kw, s = shape
    rng = np.random.default_rng(1)
    x = rng.normal(size=(n, c, h, w))
    cols = reference.im2col(x, kh, kw, s, s)
    g = rng.normal(size=cols.shape)
    lhs = float((cols * g).sum())
    rhs = float((x * reference.col2im(g, n, c, h, w, kh, kw, s, s)).sum())
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


@pytest.mark.parametrize("k,s", [(2, 2), (3, 1), (3, 3)])
def test_maxpool_forward_matches_naive(k, s):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 9, 9))
    out, argmax = reference.maxpool_forward(x, k, s)
    n, c, oh, ow = out.shape
    for b in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    window = x[b, ci, oy * s : oy * s + k, ox * s : ox * s + k]
                    assert out[b, ci, oy, ox] == window.max()
                    pos = argmax[b, ci, oy, ox]
                    assert x[b, ci, pos // 9, pos % 9] == window.max()


def test_maxpool_backward_scatters_to_argmax():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, argmax = reference.maxpool_forward(x, 2, 2)
    g = np.ones_like(out)
    back = reference.maxpool_backward(g, argmax, 2, 2)
    np.testing.assert_array_equal(back, [[[[0, 0], [0, 1]]]])


def test_maxpool_tie_breaks_to_first_position():
    x = np.full((1, 1, 2, 2), 5.0)
    _, argmax = reference.maxpool_forward(x, 2, 2)
    assert argmax[0, 0, 0, 0] == 0


@pytest.mark.skipif(_kernels.BACKEND != "cython", reason="compiled backend unavailable")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", SHAPES)
def test_compiled_backend_matches_reference(shape, dtype):
    from ralab._kernels import conv_cy

    n, c, h, w, kh, kw, s = shape
    rng = np.random.default_rng(3)
    x = np.ascontiguousarray(rng.normal(size=(n, c, h, w)).astype(dtype))
    ref_cols = reference.im2col(x, kh, kw, s, s)
    np.testing.assert_array_equal(conv_cy.im2col(x, kh, kw, s, s), ref_cols)
    g = np.ascontiguousarray(rng.normal(size=ref_cols.shape).astype(dtype))
    np.testing.assert_array_equal(
        conv_cy.col2im(g, n, c, h, w, kh, kw, s, s),
        reference.col2im(g, n, c, h, w, kh, kw, s, s),
    )
    k = min(kh, h, w)
    out_ref, arg_ref = reference.maxpool_forward(x, k, k)
    out_cy, arg_cy = conv_cy.maxpool_forward(x, k, k)
    np.testing.assert_array_equal(out_cy, out_ref)
    np.testing.assert_array_equal(arg_cy, arg_ref)
    gp = np.ascontiguousarray(rng.normal(size=out_ref.shape).astype(dtype))
    np.testing.assert_array_equal(
        conv_cy.maxpool_backward(gp, arg_cy, h, w),
        reference.maxpool_backward(gp, arg_ref, h, w),
    )
