"""Numeric trust suite: gradient checks, brute-force kernel oracles,
protocol arithmetic, and determinism probes. Everything here recomputes
its expectations from scratch (the naive loops below deliberately do not
touch layerlab.kernels), so a silent numeric regression anywhere in the
stack turns a check red.
"""

import math
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, SplitConfig, split_dataset
from .layers import (
    Adam,
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    MaxPool2x2,
    Mode,
    UpSample2x,
    conv_same_padding,
    softmax_ce_loss,
)
from .models import base0
from .pipeline import ImagePipeline, run_pipeline
from .training import TrainConfig, train


def _naive_conv(x, w, b, stride, pad):
    top, bottom, left, right = pad
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (top, bottom), (left, right)))
    n, c, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for fi in range(f):
            for y in range(ho):
                for xo in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                s += xp[bi, ci, y * stride + i, xo * stride + j] * w[fi, ci, i, j]
                    out[bi, fi, y, xo] = s + b[fi]
    return out


def _naive_maxpool(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    for bi in range(n):
        for ci in range(c):
            for y in range(h // 2):
                for xo in range(w // 2):
                    out[bi, ci, y, xo] = x[bi, ci, 2 * y : 2 * y + 2, 2 * xo : 2 * xo + 2].max()
    return out


def check_gradcheck_dense_relu():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w1 = Tensor(rng.normal(size=(6, 4)).astype(np.float32) * 0.5)
        b1 = Tensor(rng.normal(size=4).astype(np.float32) * 0.1)
        w2 = Tensor(rng.normal(size=(4, 1)).astype(np.float32) * 0.5)

        def fn(x):
            h = ad.relu(ad.add(ad.matmul(x, w1), b1))
            return ad.sum_all(ad.matmul(h, w2))

        x = rng.normal(size=(3, 6)).astype(np.float32)
        while np.any(np.abs(x @ w1.data + b1.data) < 1e-2):
            x = rng.normal(size=(3, 6)).astype(np.float32)
        worst = max(worst, ad.grad_check(fn, Tensor(x, requires_grad=True)))
    return worst < 1e-3, f"max rel err {worst:.2e} (limit 1e-3)"


def check_gradcheck_conv():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        conv = Conv2d(2, 3, rng)
        x0 = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
        labels = rng.integers(0, 48, size=2)

        def fn(k):
            conv.kernel = k
            out = conv.forward(Tensor(x0), Mode.EVAL)
            loss, _ = softmax_ce_loss(ad.reshape(out, (2, -1)), labels)
            return loss

        worst = max(worst, ad.grad_check(fn, Tensor(conv.kernel.data.copy(), requires_grad=True)))
    return worst < 1e-3, f"max rel err {worst:.2e} (limit 1e-3)"


def check_gradcheck_batchnorm():
    # a random linear functional of the output: sum(out^2) is almost
    # invariant under the batch normalization itself, which starves the
    # check of signal
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        bn = BatchNorm(3)
        r = Tensor(rng.normal(size=(5, 3)).astype(np.float32))

        def fn(x):
            out = bn.forward(x, Mode.TRAIN)
            return ad.sum_all(ad.mul(out, r))

        x0 = rng.normal(size=(5, 3)).astype(np.float32)
        worst = max(worst, ad.grad_check(fn, Tensor(x0, requires_grad=True)))
    return worst < 1e-3, f"max rel err {worst:.2e} (limit 1e-3)"


def check_gradcheck_loss():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        labels = rng.integers(0, 8, size=4)

        def fn(x):
            loss, _ = softmax_ce_loss(x, labels)
            return loss

        x0 = rng.normal(size=(4, 8)).astype(np.float32)
        worst = max(worst, ad.grad_check(fn, Tensor(x0, requires_grad=True)))
    return worst < 1e-3, f"max rel err {worst:.2e} (limit 1e-3)"


def check_conv_oracle():
    worst = 0.0
    for case in range(20):
        rng = np.random.default_rng(400 + case)
        c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(4, 9))
        stride = int(rng.choice([1, 2]))
        conv = Conv2d(c, f, rng, stride=stride)
        x = rng.normal(size=(2, c, h, h)).astype(np.float32)
        pad = conv_same_padding(h, h, 3, 3, stride)
        want = _naive_conv(x, conv.kernel.data, conv.bias.data, stride, pad)
        got = conv.forward(Tensor(x), Mode.EVAL).data
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-5, f"max abs err {worst:.2e} (limit 1e-5)"


def check_maxpool_oracle():
    for case in range(20):
        rng = np.random.default_rng(500 + case)
        x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
        got = MaxPool2x2().forward(Tensor(x), Mode.EVAL).data
        if not np.array_equal(got, _naive_maxpool(x)):
            return False, f"mismatch on case {case}"
    return True, "exact match on 20 random cases"


def check_softmax_rows():
    rng = np.random.default_rng(600)
    logits = Tensor((rng.normal(size=(32, 10)) * 25).astype(np.float32))
    _, probs = softmax_ce_loss(logits, rng.integers(0, 10, size=32))
    err = float(np.abs(probs.sum(axis=1) - 1.0).max())
    loss, _ = softmax_ce_loss(Tensor(np.zeros((1, 2), np.float32)), np.array([0]))
    ln2_err = abs(loss.item() - math.log(2.0))
    ok = err < 1e-6 and ln2_err < 1e-6
    return ok, f"row-sum err {err:.2e}, uniform-loss err {ln2_err:.2e}"


def check_adam_bowl():
    w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam([w], lr=1e-2)
    for _ in range(500):
        w.grad = (2.0 * w.data).astype(np.float32)
        opt.step()
    final = abs(float(w.data[0]))
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    Adam([p]).step()
    untouched = np.array_equal(p.data, [1.0, 2.0])
    return final < 0.05 and untouched, f"|w| after 500 steps {final:.3f} (limit 0.05)"


def _balanced(n):
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, size=(n, 1, 4, 4), dtype=np.uint8)
    labels = np.tile([0, 1], n // 2).astype(np.int64)
    return Dataset(images, labels, 1, "synth", ["a", "b"], role="subset")


def check_split_arithmetic():
    train_s, val_s, test_s = split_dataset(_balanced(128), SplitConfig())
    ok_128 = (
        (len(train_s), len(val_s), len(test_s)) == (72, 24, 32)
        and list(test_s.class_counts()) == [16, 16]
        and list(val_s.class_counts()) == [12, 12]
        and list(train_s.class_counts()) == [36, 36]
    )
    tv, te = split_dataset(_balanced(600), SplitConfig())[0], None
    from .data import stratified_split

    trainval, test = stratified_split(_balanced(600), 0.25, 42)
    ok_600 = (len(trainval), len(test)) == (450, 150)
    return ok_128 and ok_600, "128 -> 72/24/32 balanced; 600 -> 450/150"


def check_dropout_determinism():
    x = Tensor(np.random.default_rng(8).normal(size=(16, 16)).astype(np.float32))
    eval_out = Dropout(0.25, seed=1).forward(x, Mode.EVAL)
    identity = eval_out is x
    a = Dropout(0.5, seed=42).forward(x, Mode.TRAIN).data
    b = Dropout(0.5, seed=42).forward(x, Mode.TRAIN).data
    return identity and np.array_equal(a, b), "eval identity; masks bitwise reproducible"


def check_training_determinism():
    rng = np.random.default_rng(9)
    labels = np.tile([0, 1], 32).astype(np.int64)
    images = np.where(labels[:, None, None, None] == 0,
                      rng.integers(0, 60, (64, 1, 6, 6)),
                      rng.integers(196, 256, (64, 1, 6, 6))).astype(np.uint8)
    d = Dataset(images, labels, 1, "synth", ["a", "b"], role="subset")
    splits = tuple(run_pipeline(p, ImagePipeline(("scale01",)))
                   for p in split_dataset(d, SplitConfig()))
    cfg = TrainConfig(nepochs=3, seed=0)
    r1 = train(base0(2), *splits, cfg, dataset_id="det")
    r2 = train(base0(2), *splits, cfg, dataset_id="det")
    ok = (r1.test_accuracy == r2.test_accuracy
          and r1.best_val_loss == r2.best_val_loss)
    return ok, f"two runs: acc {r1.test_accuracy} == {r2.test_accuracy}, val bitwise equal"


def check_pipeline_order_probe():
    img = np.zeros((1, 3, 8, 8), dtype=np.uint8)
    img[:, :, :, 4:] = 255
    d = Dataset(img, np.zeros(1, dtype=np.int64), 3, "probe", ["x"])
    a = run_pipeline(d, ImagePipeline(("sharpen", "preprocess")))
    b = run_pipeline(d, ImagePipeline(("preprocess", "sharpen")))
    diff = float(np.abs(a.x - b.x).max())
    return diff > 0.0, f"max abs order difference {diff:.1f} (> 0 required)"


def check_upsample_pool_identity():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    up = UpSample2x().forward(Tensor(x), Mode.EVAL).data
    n, c, h, w = up.shape
    avg = up.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    err = float(np.abs(avg - x).max())
    return err < 1e-6, f"upsample then 2x2 avg-pool: max err {err:.2e}"


def check_batchnorm_statistics():
    rng = np.random.default_rng(11)
    bn = BatchNorm(4, eps=1e-5)
    x = Tensor((rng.normal(size=(64, 4, 6, 6)) * 2.0 + 3.0).astype(np.float32))
    out = bn.forward(x, Mode.TRAIN).data
    mean_err = float(np.abs(out.mean(axis=(0, 2, 3)) - bn.beta.data).max())
    var_err = float(np.abs(out.var(axis=(0, 2, 3)) - bn.gamma.data ** 2).max())
    return mean_err < 1e-4 and var_err < 0.01, (
        f"|mean-beta| {mean_err:.2e} (limit 1e-4), |var-gamma^2| {var_err:.3f} (limit 0.01)"
    )


CHECKS = [
    ("gradcheck-dense-relu", check_gradcheck_dense_relu),
    ("gradcheck-conv", check_gradcheck_conv),
    ("gradcheck-batchnorm", check_gradcheck_batchnorm),
    ("gradcheck-loss", check_gradcheck_loss),
    ("conv-brute-force-oracle", check_conv_oracle),
    ("maxpool-brute-force-oracle", check_maxpool_oracle),
    ("softmax-rows-sum-to-one", check_softmax_rows),
    ("adam-quadratic-bowl", check_adam_bowl),
    ("split-arithmetic", check_split_arithmetic),
    ("dropout-determinism", check_dropout_determinism),
    ("training-determinism", check_training_determinism),
    ("pipeline-order-probe", check_pipeline_order_probe),
    ("upsample-avgpool-identity", check_upsample_pool_identity),
    ("batchnorm-statistics", check_batchnorm_statistics),
]


def run_all(printer=print) -> bool:
    all_ok = True
    width = max(len(name) for name, _ in CHECKS)
    started = time.perf_counter()
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        dt = time.perf_counter() - t0
        printer(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}  [{dt:.2f}s]")
    printer(f"{'OK' if all_ok else 'FAILED'} ({len(CHECKS)} checks, "
            f"{time.perf_counter() - started:.1f}s total)")
    return all_ok
