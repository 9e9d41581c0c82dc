import numpy as np
import pytest

from layerlab import models as M
from layerlab.autodiff import Tensor
from layerlab.layers import Mode
from layerlab.models import SCHEDULES, ModelSpec, SpecError


def test_base0_structure_and_name():
    spec = M.base0(2)
    assert len(spec.layers) == 3
    assert spec.variant_id == "Base0"
    assert [d.kind for d in spec.layers] == ["flatten", "dense", "activation"]


def test_base0_head_follows_num_classes():
    assert M.base0(10).layers[1].units == 10


def test_base0_rejects_single_class():
    with pytest.raises(SpecError):
        M.base0(1)


def test_baseseq_has_six_mutable_layers():
    spec = M.base_seq(2)
    assert sum(spec.mutable_mask) == 6
    assert spec.layers[4].kind == "flatten" and not spec.mutable_mask[4]


def test_baseseq_conv_bn_swap_name():
    spec = M.base_seq(2)
    layers = list(spec.layers)
    layers[0], layers[1] = layers[1], layers[0]
    swapped = ModelSpec(spec.family, tuple(layers), spec.mutable_mask, 2)
    assert swapped.variant_id == "BaseSeq(BN-Conv)"


def test_baseseq_dropout_rate_reads_back():
    spec = M.base_seq(2)
    assert spec.layers[3].rate == 0.25


def test_res18_schedule_names():
    for name, sched in SCHEDULES.items():
        assert M.base_res18(sched, 2).variant_id == name


def test_res18_reverse_schedule():
    fwd = SCHEDULES["Res64to512"].widths
    assert tuple(reversed(fwd)) == SCHEDULES["Res512to64"].widths


def test_res18_schedule_reads_back():
    spec = M.base_res18(SCHEDULES["Res512to64"], 2)
    widths = tuple(d.filters for d in spec.layers if d.kind == "resstage")
    assert widths == (512, 256, 128, 64)


@pytest.mark.parametrize("name", list(SCHEDULES))
def test_res18_has_twenty_convs(name):
    net = M.compile_network(M.base_res18(SCHEDULES[name], 2), (3, 32, 32), seed=0)
    assert net.conv_count() == 20


def test_compile_baseseq_dense_input_dim():
    net = M.compile_network(M.base_seq(2), (1, 28, 28), seed=0)
    dense = [l for l in net.layers if hasattr(l, "weight")][0]
    assert dense.weight.shape == (32 * 14 * 14, 2)


def test_compile_base0_dense_weight_shape():
    net = M.compile_network(M.base0(2), (3, 32, 32), seed=0)
    dense = [l for l in net.layers if hasattr(l, "weight")][0]
    assert dense.weight.shape == (3072, 2)


def test_compile_deep_pooling_underflows():
    layers = tuple([M.maxpool()] * 6 + [M.flatten(), M.dense(2), M.activation("softmax")])
    spec = ModelSpec("Custom", layers, (True,) * len(layers), 2)
    with pytest.raises(SpecError, match="spatial underflow"):
        M.compile_network(spec, (1, 28, 28), seed=0)


def test_conv_after_flatten_is_invalid():
    layers = (M.flatten(), M.conv(8), M.dense(2))
    spec = ModelSpec("Custom", layers, (True,) * 3, 2)
    with pytest.raises(SpecError, match="spatial"):
        M.validate_structure(spec)


def test_missing_head_is_invalid():
    layers = (M.conv(8), M.flatten())
    spec = ModelSpec("Custom", layers, (True,) * 2, 2)
    with pytest.raises(SpecError, match="classification head"):
        M.validate_structure(spec)


def test_head_units_must_match_classes():
    layers = (M.flatten(), M.dense(5), M.activation("softmax"))
    spec = ModelSpec("Custom", layers, (True,) * 3, 2)
    with pytest.raises(SpecError, match="head"):
        M.validate_structure(spec)


def test_compile_num_classes_cross_check():
    with pytest.raises(SpecError):
        M.compile_network(M.base0(2), (1, 8, 8), num_classes=3, seed=0)


def test_compile_same_seed_bitwise_identical():
    a = M.compile_network(M.base_seq(2), (1, 28, 28), seed=42)
    b = M.compile_network(M.base_seq(2), (1, 28, 28), seed=42)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    c = M.compile_network(M.base_seq(2), (1, 28, 28), seed=43)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("builder,shape", [
    (lambda: M.base0(2), (1, 28, 28)),
    (lambda: M.base_seq(2), (1, 28, 28)),
    (lambda: M.base_res18(SCHEDULES["Res64to512"], 2), (3, 32, 32)),
])
def test_shape_inference_matches_forward(builder, shape):
    spec = builder()
    shapes = M.infer_shapes(spec, shape)
    net = M.compile_network(spec, shape, seed=0)
    x = Tensor(np.zeros((2,) + shape, dtype=np.float32))
    for layer, want in zip(net.layers, shapes):
        x = layer.forward(x, Mode.EVAL)
        assert x.shape[1:] == tuple(want)


@pytest.mark.parametrize("vid", ["Base0", "BaseSeq", "Res64to512", "Res512to64", "Res64", "Res512"])
def test_variant_id_round_trips_builtin(vid):
    spec = M.parse_variant_id(vid, num_classes=2)
    assert spec.variant_id == vid


def test_variant_id_round_trips_mutations():
    base = M.base_seq(2)
    layers = list(base.layers)
    layers[0], layers[1] = layers[1], layers[0]
    swapped = ModelSpec(base.family, tuple(layers), base.mutable_mask, 2)
    re_spec = M.parse_variant_id(swapped.variant_id, 2)
    assert [d.kind for d in re_spec.layers] == [d.kind for d in swapped.layers]

    removed = ModelSpec(base.family, base.layers[:1] + base.layers[2:],
                        base.mutable_mask[:1] + base.mutable_mask[2:], 2)
    assert removed.variant_id == "BaseSeq(-BN)"
    re_spec = M.parse_variant_id("BaseSeq(-BN)", 2)
    assert re_spec.layers == removed.layers

    inserted = ModelSpec("Base0", (M.flatten(), M.batchnorm(), M.dense(2), M.activation("softmax")),
                         (False, True, True, True), 2)
    assert inserted.variant_id == "Base0(+BN@1)"
    assert M.parse_variant_id("Base0(+BN@1)", 2).layers == inserted.layers


def test_spec_json_round_trip():
    for spec in (M.base0(3), M.base_seq(2), M.base_res18(SCHEDULES["Res512"], 4)):
        again = ModelSpec.from_json(spec.to_json())
        assert again == spec
        assert M.spec_hash(again) == M.spec_hash(spec)


def test_spec_json_rejects_tampered_variant_id():
    blob = M.base0(2).to_json()
    blob["variant_id"] = "Base0(+BN@1)"
    with pytest.raises(SpecError):
        ModelSpec.from_json(blob)


def test_predict_runs_and_shapes():
    net = M.compile_network(M.base0(2), (1, 8, 8), seed=0)
    labels = net.predict(np.zeros((5, 1, 8, 8), dtype=np.float32))
    assert labels.shape == (5,)


def test_logits_head_variant_is_valid():
    # removing the trailing softmax leaves a valid logits-head spec
    base = M.base0(2)
    spec = ModelSpec(base.family, base.layers[:-1], base.mutable_mask[:-1], 2)
    M.validate_structure(spec)
    assert spec.variant_id == "Base0(-AL)"


@pytest.mark.parametrize("downsample", [False, True])
def test_residual_block_gradcheck(downsample):
    # the skip connection fans the input gradient into two paths; both the
    # projection and identity shortcuts must accumulate correctly
    from layerlab import autodiff as ad
    from layerlab.layers import softmax_ce_loss
    from layerlab.models import BasicBlock

    rng = np.random.default_rng(17)
    block = BasicBlock(2, 2, downsample, rng)
    x0 = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    out_dim = 2 * (2 if downsample else 4) ** 2
    labels = np.array([1, out_dim - 1])

    def fn(x):
        out = block.forward(x, Mode.EVAL)
        loss, _ = softmax_ce_loss(ad.reshape(out, (2, -1)), labels)
        return loss

    assert ad.grad_check(fn, Tensor(x0, requires_grad=True)) < 1e-3


def test_resnet_stage_trains_end_to_end():
    # a miniature residual network must overfit a tiny batch: exercises
    # batchnorm in 4D, the projection shortcut, and gradient accumulation
    # through the skip path inside a real optimization loop
    from layerlab.autodiff import GradTape
    from layerlab.layers import Adam, softmax_ce_loss

    layers = (
        M.conv(4), M.batchnorm(), M.activation("relu"),
        M.resstage(4, 2, False), M.resstage(8, 2, True),
        M.gap(), M.dense(2), M.activation("softmax"),
    )
    spec = ModelSpec("Custom", layers, (False,) * len(layers), 2)
    net = M.compile_network(spec, (1, 8, 8), seed=0)
    assert net.conv_count() == 1 + 8 + 1  # stem + block convs + 1 projection

    rng = np.random.default_rng(0)
    x = rng.random((8, 1, 8, 8)).astype(np.float32)
    y = np.array([0, 1] * 4)
    opt = Adam(net.parameters(), lr=3e-3)
    first = last = None
    # ~300 steps: momentum-0.99 running stats need that long to catch up
    # with the batch stats before eval-mode predictions match train mode
    for _ in range(300):
        with GradTape() as tape:
            logits = net.forward_logits(Tensor(x), Mode.TRAIN)
            loss, _ = softmax_ce_loss(logits, y)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
        last = loss.item()
        if first is None:
            first = last
    assert last < 0.01, f"failed to overfit: {first:.3f} -> {last:.3f}"
    assert (net.predict(x) == y).mean() == 1.0
