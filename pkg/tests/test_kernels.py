import numpy as np
import pytest

from layerlab import kernels

HAVE_NUMBA = kernels._numba_available()

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def test_active_backend_is_valid():
    assert kernels.active_backend() in ("auto", "numpy", "numba")


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_impl("cuda")


@needs_numba
@pytest.mark.parametrize("case", range(25))
def test_backends_agree_on_conv(case):
    rng = np.random.default_rng(7000 + case)
    n, c, f = (int(rng.integers(1, 4)) for _ in range(3))
    h, w = (int(rng.integers(4, 10)) for _ in range(2))
    stride = int(rng.choice([1, 2]))
    xp = rng.normal(size=(n, c, h, w)).astype(np.float32)
    wk = rng.normal(size=(f, c, 3, 3)).astype(np.float32)
    np_impl = kernels.get_impl("numpy")
    nb_impl = kernels.get_impl("numba")
    out_np = np_impl["conv2d_forward"](xp, wk, stride)
    out_nb = nb_impl["conv2d_forward"](xp, wk, stride)
    np.testing.assert_allclose(out_np, out_nb, atol=1e-5)

    dout = rng.normal(size=out_np.shape).astype(np.float32)
    dx_np, dw_np = np_impl["conv2d_backward"](xp, wk, dout, stride, True)
    dx_nb, dw_nb = nb_impl["conv2d_backward"](xp, wk, dout, stride, True)
    np.testing.assert_allclose(dx_np, dx_nb, atol=1e-4)
    np.testing.assert_allclose(dw_np, dw_nb, atol=1e-4)


@needs_numba
@pytest.mark.parametrize("case", range(10))
def test_backends_agree_on_maxpool(case):
    rng = np.random.default_rng(8000 + case)
    x = rng.normal(size=(2, 3, 8, 6)).astype(np.float32)
    np_impl = kernels.get_impl("numpy")
    nb_impl = kernels.get_impl("numba")
    out_np, idx_np = np_impl["maxpool2_forward"](x)
    out_nb, idx_nb = nb_impl["maxpool2_forward"](x)
    np.testing.assert_array_equal(out_np, out_nb)
    np.testing.assert_array_equal(idx_np, idx_nb)

    dout = rng.normal(size=out_np.shape).astype(np.float32)
    np.testing.assert_array_equal(
        np_impl["maxpool2_backward"](dout, idx_np),
        nb_impl["maxpool2_backward"](dout, idx_nb),
    )


@needs_numba
def test_backends_agree_on_maxpool_ties():
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    np_impl = kernels.get_impl("numpy")
    nb_impl = kernels.get_impl("numba")
    _, idx_np = np_impl["maxpool2_forward"](x)
    _, idx_nb = nb_impl["maxpool2_forward"](x)
    # both must pick the first window element on ties
    np.testing.assert_array_equal(idx_np, 0)
    np.testing.assert_array_equal(idx_nb, 0)


def test_conv_backward_skips_dx_when_not_needed():
    rng = np.random.default_rng(1)
    xp = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    wk = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
    dout = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
    dx, dw = kernels.conv2d_backward(xp, wk, dout, 1, False)
    assert dx is None
    assert dw.shape == wk.shape
