import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdconv import kernels

from oracles import naive_conv2d

py = kernels.python_backend
cc = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(cc is None, reason="compiled extension not built")


def test_backend_flag_matches_selection():
    assert kernels.BACKEND in ("compiled", "python")
    assert (kernels.BACKEND == "compiled") == (kernels.compiled_backend is not None)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2 ** 31))
def test_col2im_is_adjoint_of_im2col(c, k, extra, stride, seed):
    r = np.random.default_rng(seed)
    hp = wp = k + extra + stride
    x = r.standard_normal((2, c, hp, wp))
    cols = py.im2col(x, k, k, stride)
    y = r.standard_normal(cols.shape)
    lhs = float((y * cols).sum())
    rhs = float((py.col2im(y, c, hp, wp, k, k, stride) * x).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_matches_python(dtype, rng):
    x = rng.standard_normal((3, 4, 9, 8)).astype(dtype)
    for k, s in [(1, 1), (3, 1), (3, 2)]:
        cols_py = py.im2col(x, k, k, s)
        cols_cc = cc.im2col(x, k, k, s)
        np.testing.assert_array_equal(cols_py, cols_cc)
        np.testing.assert_allclose(py.col2im(cols_py, 4, 9, 8, k, k, s), cc.col2im(cols_py, 4, 9, 8, k, k, s),
                                   rtol=1e-6, atol=1e-6)
        w = rng.standard_normal((3, 6, 2, k, k)).astype(dtype)
        w[rng.random(w.shape) < 0.5] = 0
        b = rng.standard_normal((3, 6)).astype(dtype)
        out_py, m_py = py.sparse_conv2d(x, w, b, s, 2)
        out_cc, m_cc = cc.sparse_conv2d(x, w, b, s, 2)
        assert m_py == m_cc
        np.testing.assert_allclose(out_py, out_cc, rtol=1e-5, atol=1e-5)


def test_sparse_conv_matches_dense_and_counts_nonzeros(backend, rng):
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((2, 6, 4, 3, 3))
    w[rng.random(w.shape) < 0.5] = 0
    b = rng.standard_normal((2, 6))
    out, macs = kernels.sparse_conv2d(x, w, b, 2, 1)
    for s in range(2):
        ref = naive_conv2d(x[s:s + 1], w[s], b[s], stride=2)
        np.testing.assert_allclose(out[s:s + 1], ref, atol=1e-10)
    assert macs == int((w != 0).sum()) * 3 * 3


def test_sparse_conv_dense_kernel_counts_all_positions(backend, rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = np.ones((1, 3, 2, 3, 3), np.float32)
    _, macs = kernels.sparse_conv2d(x, w, None, 1, 1)
    assert macs == 3 * 2 * 9 * 3 * 3
