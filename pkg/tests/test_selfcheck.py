import numpy as np
import pytest

from layerlab import kernels, selfcheck


def test_all_checks_pass_quickly():
    lines = []
    assert selfcheck.run_all(printer=lines.append)
    assert sum("PASS" in l for l in lines) == len(selfcheck.CHECKS)


def test_injected_wrong_conv_backward_fails_selfcheck(monkeypatch):
    # mutation-test the checker itself: corrupt the production backward and
    # the gradient check must go red
    real = kernels.conv2d_backward

    def corrupted(xp, w, dout, stride, need_dx):
        dx, dw = real(xp, w, dout, stride, need_dx)
        return dx, dw * 1.5

    monkeypatch.setattr(kernels, "conv2d_backward", corrupted)
    ok, detail = selfcheck.check_gradcheck_conv()
    assert not ok, f"checker accepted a corrupted backward rule: {detail}"


def test_injected_wrong_pool_forward_fails_oracle(monkeypatch):
    real = kernels.maxpool2_forward

    def corrupted(x):
        out, idx = real(x)
        return out + 1.0, idx

    monkeypatch.setattr(kernels, "maxpool2_forward", corrupted)
    ok, detail = selfcheck.check_maxpool_oracle()
    assert not ok


def test_check_crash_reports_fail_not_abort(monkeypatch):
    def boom():
        raise RuntimeError("kaboom")

    monkeypatch.setitem(selfcheck.__dict__, "CHECKS", [("boom", boom)])
    lines = []
    assert not selfcheck.run_all(printer=lines.append)
    assert any("FAIL" in l and "kaboom" in l for l in lines)


def test_debug_mode_catches_non_finite(monkeypatch):
    from layerlab import autodiff as ad
    from layerlab.autodiff import Tensor

    monkeypatch.setattr(ad, "DEBUG_CHECKS", True)
    big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="mul"):
        ad.mul(big, big)
