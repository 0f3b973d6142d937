import numpy as np
import pytest

from vasim import kernels
from oracles import conv2d_valid_reference

BACKENDS = [b for b in kernels.BACKENDS if b != "numba" or kernels.HAVE_NUMBA]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def test_conv_forward_matches_loops(backend, rng):
    x = rng.standard_normal((3, 2, 11, 9))
    w = rng.standard_normal((4, 2, 5, 5))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(kernels.conv_forward(x, w, b), conv2d_valid_reference(x, w, b),
                               rtol=1e-10, atol=1e-10)


def test_conv_backward_is_adjoint(backend, rng):
    # <dy, conv(x)> is linear in x and w: check dx and dw against the forward map
    x = rng.standard_normal((2, 3, 10, 10))
    w = rng.standard_normal((4, 3, 5, 5))
    dy = rng.standard_normal((2, 4, 6, 6))
    dx, dw, db = kernels.conv_backward(x, w, dy, need_dx=True)
    zero_b = np.zeros(4)
    for _ in range(3):
        ex = rng.standard_normal(x.shape)
        ew = rng.standard_normal(w.shape)
        assert np.sum(dy * kernels.conv_forward(ex, w, zero_b)) == pytest.approx(np.sum(dx * ex), rel=1e-9)
        assert np.sum(dy * kernels.conv_forward(x, ew, zero_b)) == pytest.approx(np.sum(dw * ew), rel=1e-9)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)))
    assert kernels.conv_backward(x, w, dy, need_dx=False)[0] is None


def test_maxpool_forward_backward(backend, rng):
    x = rng.standard_normal((2, 3, 8, 6))
    y, idx = kernels.maxpool_forward(x)
    ref = x.reshape(2, 3, 4, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(y, ref)
    assert idx.dtype == np.int8
    dy = rng.standard_normal(y.shape)
    dx = kernels.maxpool_backward(dy, idx, x.shape)
    assert dx.sum() == pytest.approx(dy.sum())
    np.testing.assert_array_equal((dx != 0).reshape(2, 3, 4, 2, 3, 2).sum(axis=(3, 5)), 1)


def test_maxpool_odd_size_drops_last_row(backend):
    x = np.arange(2 * 1 * 5 * 5, dtype=float).reshape(2, 1, 5, 5)
    y, idx = kernels.maxpool_forward(x)
    assert y.shape == (2, 1, 2, 2)
    dx = kernels.maxpool_backward(np.ones_like(y), idx, x.shape)
    assert dx[:, :, 4, :].sum() == 0 and dx[:, :, :, 4].sum() == 0


def test_maxpool_tie_takes_first(backend):
    x = np.zeros((1, 1, 2, 2))
    y, idx = kernels.maxpool_forward(x)
    assert idx[0, 0, 0, 0] == 0


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype, rng):
    x = rng.uniform(size=(5, 15, 20, 20)).astype(dtype)
    w = (rng.standard_normal((15, 15, 5, 5)) * 0.1).astype(dtype)
    b = rng.standard_normal(15).astype(dtype)
    dy = rng.standard_normal((5, 15, 16, 16)).astype(dtype)
    out = {}
    for name in ("numba", "numpy"):
        prev = kernels.set_backend(name)
        try:
            out[name] = (kernels.conv_forward(x, w, b), *kernels.conv_backward(x, w, dy),
                         *kernels.maxpool_forward(x))
        finally:
            kernels.set_backend(prev)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    for a, c in zip(out["numba"], out["numpy"]):
        assert a.dtype == c.dtype
        np.testing.assert_allclose(a, c, rtol=tol, atol=tol)


def test_set_backend_validation():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
    prev = kernels.set_backend("numpy")
    assert kernels.get_backend() == "numpy"
    kernels.set_backend(prev)
