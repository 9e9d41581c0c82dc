"""Hot numeric kernels: conv2d and 2x2 maxpool, forward and backward.

Two interchangeable implementations exist: numba @njit loop nests and a
pure-numpy path built from strided GEMMs. LAYERLAB_BACKEND picks one:
"numba" or "numpy" force a uniform backend; unset (or "auto") uses the
benchmark winner per kernel: GEMM conv (BLAS is unbeatable past a couple
of channels) and numba maxpool (20x over the reshape trick), falling back
to all-numpy when numba is not importable. benchmarks/bench_kernels.py
reproduces the comparison.

All kernels take C-contiguous float32 arrays. Convolution inputs arrive
already padded; maxpool inputs arrive with even spatial dims (callers pad
odd sizes with -inf). dw accumulates in float64 in the numba path and via
BLAS pairwise sums in the numpy path, so both stay well inside the 1e-5
oracle tolerance while remaining bitwise deterministic for a fixed
backend.
"""

import os

import numpy as np

ENV_BACKEND = "LAYERLAB_BACKEND"

_impls: dict[str, dict] = {}


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _pick_backend() -> str:
    choice = os.environ.get(ENV_BACKEND, "").strip().lower()
    if choice not in ("", "auto", "numba", "numpy"):
        raise ValueError(
            f"{ENV_BACKEND} must be 'auto', 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _numba_available():
            raise RuntimeError(f"{ENV_BACKEND}=numba but numba is not importable")
        return "numba"
    return "auto" if _numba_available() else "numpy"


# ---------------------------------------------------------------------------
# numpy implementation: kh*kw strided GEMMs instead of an im2col buffer.

def _np_conv2d_forward(xp, w, stride):
    n, c, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
            # [F,C] x [N,C,Ho,Wo] -> [F,N,Ho,Wo]
            out += np.tensordot(w[:, :, i, j], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def _np_conv2d_backward(xp, w, dout, stride, need_dx):
    n, c, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + ho * stride, stride)
            ws = slice(j, j + wo * stride, stride)
            dw[:, :, i, j] = np.tensordot(dout, xp[:, :, hs, ws], axes=([0, 2, 3], [0, 2, 3]))
            if need_dx:
                dxp[:, :, hs, ws] += np.tensordot(
                    w[:, :, i, j], dout, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
    return dxp, dw


def _np_maxpool2_forward(x):
    n, c, h, w = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    # argmax over the row-major window gives the first-index tie-break
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _np_maxpool2_backward(dout, idx):
    n, c, ho, wo = dout.shape
    dwin = np.zeros((n, c, ho, wo, 4), dtype=np.float32)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dx = (
        dwin.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * 2, wo * 2)
    )
    return np.ascontiguousarray(dx)


def _build_numpy_impl():
    return {
        "name": "numpy",
        "conv2d_forward": _np_conv2d_forward,
        "conv2d_backward": _np_conv2d_backward,
        "maxpool2_forward": _np_maxpool2_forward,
        "maxpool2_backward": _np_maxpool2_backward,
    }


# ---------------------------------------------------------------------------
# numba implementation: plain loop nests; dw accumulates in float64.

def _build_numba_impl():
    from numba import njit

    @njit(cache=True, nogil=True)
    def conv2d_forward(xp, w, stride):
        # per (kernel tap, channel) accumulation over contiguous output rows
        n, c, hp, wp = xp.shape
        f, _, kh, kw = w.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.zeros((n, f, ho, wo), dtype=np.float32)
        for b in range(n):
            for fo in range(f):
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[fo, ci, i, j]
                            for y in range(ho):
                                row = xp[b, ci, y * stride + i]
                                orow = out[b, fo, y]
                                for x in range(wo):
                                    orow[x] += wv * row[x * stride + j]
        return out

    @njit(cache=True, nogil=True)
    def _conv2d_backward(xp, w, dout, stride, need_dx):
        n, c, hp, wp = xp.shape
        f, _, kh, kw = w.shape
        ho, wo = dout.shape[2], dout.shape[3]
        dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
        dw = np.zeros((f, c, kh, kw), dtype=np.float64)
        for b in range(n):
            for fo in range(f):
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[fo, ci, i, j]
                            acc = 0.0
                            for y in range(ho):
                                grow = dout[b, fo, y]
                                xrow = xp[b, ci, y * stride + i]
                                if need_dx:
                                    dxrow = dxp[b, ci, y * stride + i]
                                    for x in range(wo):
                                        g = grow[x]
                                        acc += g * xrow[x * stride + j]
                                        dxrow[x * stride + j] += g * wv
                                else:
                                    for x in range(wo):
                                        acc += grow[x] * xrow[x * stride + j]
                            dw[fo, ci, i, j] += acc
        return dxp, dw.astype(np.float32)

    def conv2d_backward(xp, w, dout, stride, need_dx):
        dxp, dw = _conv2d_backward(xp, w, dout, stride, need_dx)
        return (dxp if need_dx else None), dw

    @njit(cache=True, nogil=True)
    def maxpool2_forward(x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        out = np.empty((n, c, ho, wo), dtype=np.float32)
        idx = np.empty((n, c, ho, wo), dtype=np.uint8)
        for b in range(n):
            for ci in range(c):
                for y in range(ho):
                    for x2 in range(wo):
                        best = x[b, ci, 2 * y, 2 * x2]
                        k = 0
                        # strict > keeps the first index on ties
                        v = x[b, ci, 2 * y, 2 * x2 + 1]
                        if v > best:
                            best, k = v, 1
                        v = x[b, ci, 2 * y + 1, 2 * x2]
                        if v > best:
                            best, k = v, 2
                        v = x[b, ci, 2 * y + 1, 2 * x2 + 1]
                        if v > best:
                            best, k = v, 3
                        out[b, ci, y, x2] = best
                        idx[b, ci, y, x2] = k
        return out, idx

    @njit(cache=True, nogil=True)
    def maxpool2_backward(dout, idx):
        n, c, ho, wo = dout.shape
        dx = np.zeros((n, c, ho * 2, wo * 2), dtype=np.float32)
        for b in range(n):
            for ci in range(c):
                for y in range(ho):
                    for x2 in range(wo):
                        k = idx[b, ci, y, x2]
                        dx[b, ci, 2 * y + k // 2, 2 * x2 + k % 2] = dout[b, ci, y, x2]
        return dx

    return {
        "name": "numba",
        "conv2d_forward": conv2d_forward,
        "conv2d_backward": conv2d_backward,
        "maxpool2_forward": maxpool2_forward,
        "maxpool2_backward": maxpool2_backward,
    }


def get_impl(backend: str) -> dict:
    """Kernel table for an explicit backend; used by tests and benchmarks."""
    if backend not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend not in _impls:
        _impls[backend] = _build_numpy_impl() if backend == "numpy" else _build_numba_impl()
    return _impls[backend]


_active = _pick_backend()


def active_backend() -> str:
    return _active


if _active == "auto":
    _conv = get_impl("numpy")
    _pool = get_impl("numba")
else:
    _conv = _pool = get_impl(_active)

conv2d_forward = _conv["conv2d_forward"]


def conv2d_backward(xp, w, dout, stride, need_dx):
    dxp, dw = _conv["conv2d_backward"](xp, w, dout, stride, need_dx)
    return (dxp if need_dx else None), dw


maxpool2_forward = _pool["maxpool2_forward"]
maxpool2_backward = _pool["maxpool2_backward"]
