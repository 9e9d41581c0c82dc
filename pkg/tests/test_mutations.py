import numpy as np
import pytest

from layerlab import models as M
from layerlab import mutations as mut
from layerlab.models import ModelSpec, SpecError


def test_pap_bn_on_base0_includes_post_flatten_position():
    grid = mut.pap_insert(M.base0(2), M.batchnorm())
    kinds = [[d.kind for d in e.spec.layers] for e in grid.candidates()]
    assert ["flatten", "batchnorm", "dense", "activation"] in kinds
    assert grid.control.variant_id == "Base0"


def test_pap_dense_on_base0_has_exactly_one_legal_position():
    grid = mut.pap_insert(M.base0(2), M.dense(16))
    assert len(grid.candidates()) == 1
    assert grid.candidates()[0].spec.layers[1].kind == "dense"


def test_pap_conv_only_before_flatten():
    grid = mut.pap_insert(M.base0(2), M.conv(32))
    assert len(grid.candidates()) == 1
    assert [d.kind for d in grid.candidates()[0].spec.layers][0] == "conv"


def test_pap_never_mutates_base_in_place():
    base = M.base0(2)
    before = base.layers
    mut.pap_insert(base, M.batchnorm())
    assert base.layers == before


def test_pap_with_no_legal_position_warns_and_returns_control_only():
    # after the base's own GAP the region is spatial-free, so a second
    # spatial-consuming layer has nowhere legal to go
    base = ModelSpec("Custom", (M.gap(), M.dense(2)), (False, True), 2)
    with pytest.warns(UserWarning, match="no legal position"):
        grid = mut.pap_insert(base, M.gap())
    assert len(grid.entries) == 1


def test_lolo_baseseq_six_candidates_fcl_invalid():
    grid = mut.lolo(M.base_seq(2))
    cands = grid.candidates()
    assert len(cands) == 6
    invalid = [e for e in cands if not e.valid]
    assert len(invalid) == 1
    assert invalid[0].variant_id == "BaseSeq(-FCL)"
    assert "classification head" in invalid[0].invalid_reason


def test_lolo_base0():
    grid = mut.lolo(M.base0(2))
    cands = {e.variant_id: e for e in grid.candidates()}
    assert not cands["Base0(-FCL)"].valid
    assert cands["Base0(-AL)"].valid  # logits head, loss handles it


def test_lolo_candidate_count_equals_mutable_count():
    for spec in (M.base0(2), M.base_seq(5)):
        assert len(mut.lolo(spec).candidates()) == sum(spec.mutable_mask)


def test_sare_conv_bn_names_the_paper_variant():
    grid = mut.sare(M.base_seq(2), ("conv", "bn"))
    assert grid.candidates()[0].variant_id == "BaseSeq(BN-Conv)"


def test_sare_is_involution():
    base = M.base_seq(2)
    once = mut.sare(base, ("conv", "bn")).candidates()[0].spec
    twice = mut.sare(once, ("conv", "bn")).candidates()[0].spec
    assert twice.layers == base.layers
    assert twice.variant_id == "BaseSeq"


def test_sare_identical_descriptors_dedup_to_control():
    layers = (M.conv(32), M.conv(32), M.flatten(), M.dense(2), M.activation("softmax"))
    base = ModelSpec("Custom", layers, (True, True, False, True, True), 2)
    grid = mut.sare(base, (0, 1))
    assert len(grid.entries) == 1  # swap equals base, deduplicated


def test_sare_out_of_range_position_errors():
    with pytest.raises(SpecError, match="out of range"):
        mut.sare(M.base_seq(2), (0, 99))


def test_sare_adjacent_scope_swaps_mutable_neighbors():
    grid = mut.sare(M.base_seq(2), "adjacent")
    # adjacent mutable pairs: (0,1) (1,2) (2,3) (5,6); (3,4)/(4,5) touch Flatten
    assert len(grid.candidates()) == 4


def test_filter_placement_names_and_reversal():
    assert mut.filter_placement("Res512to64", 2).variant_id == "Res512to64"
    spec = mut.filter_placement("Res64", 2)
    assert tuple(d.filters for d in spec.layers if d.kind == "resstage") == (64,) * 4
    with pytest.raises(SpecError, match="Res512to64"):
        mut.filter_placement("Res1024", 2)


def test_repeat_block_counts():
    spec = mut.repeat_block(3, False, 2)
    assert len(spec.layers) == 9 + 3
    spec = mut.repeat_block(7, True, 2)
    assert len(spec.layers) == 28 + 3
    assert spec.variant_id == "Conv-PL-UpSamp-DropL-x7"


def test_repeat_block_preserves_spatial_size():
    for n in (1, 3, 7):
        spec = mut.repeat_block(n, False, 2)
        shapes = M.infer_shapes(spec, (3, 32, 32))
        assert shapes[-4] == (32, 32, 32)  # last body layer, pre-flatten


def test_generate_grid_filterplacement_four_variants():
    grid = mut.generate_grid({"base": "baseres18", "ops": ["filterplacement"], "num_classes": 2})
    assert len(grid.entries) == 4
    assert set(grid.variant_ids) == {"Res64to512", "Res512to64", "Res64", "Res512"}


def test_generate_grid_lolo_seven_entries():
    grid = mut.generate_grid({"base": "baseseq", "ops": ["lolo"], "num_classes": 2})
    assert len(grid.entries) == 7


def test_generate_grid_empty_ops_is_control_only():
    grid = mut.generate_grid({"base": "base0", "ops": [], "num_classes": 2})
    assert grid.variant_ids == ["Base0"]


def test_generate_grid_unknown_names_error():
    with pytest.raises(SpecError, match="unknown grid op"):
        mut.generate_grid({"base": "base0", "ops": ["explode"], "num_classes": 2})
    with pytest.raises(SpecError, match="unknown base family"):
        mut.generate_grid({"base": "vgg", "ops": [], "num_classes": 2})


def test_generate_grid_deterministic():
    recipe = {"base": "baseseq", "ops": ["lolo", "sare:adjacent", "pap:bn"], "num_classes": 2}
    a = mut.generate_grid(recipe)
    b = mut.generate_grid(recipe)
    assert a.variant_ids == b.variant_ids
    assert [M.spec_hash(e.spec) for e in a.entries] == [M.spec_hash(e.spec) for e in b.entries]


def test_grid_variant_ids_unique_and_json_round_trip():
    grid = mut.generate_grid(
        {"base": "baseseq", "ops": ["lolo", "sare:adjacent", "pap:conv:64", "repeat:3"],
         "num_classes": 2}
    )
    assert len(set(grid.variant_ids)) == len(grid.entries)
    again = mut.VariantGrid.from_json(grid.to_json())
    assert again.variant_ids == grid.variant_ids
    assert all(a.spec == b.spec for a, b in zip(again.entries, grid.entries))


def test_no_invalid_candidate_reaches_compile():
    # fuzz: random ops over random bases; every valid-marked entry compiles
    rng = np.random.default_rng(0)
    ops_pool = ["lolo", "sare:adjacent", "pap:bn", "pap:conv", "pap:dropout", "pap:dense:8"]
    for trial in range(10):
        ops = list(rng.choice(ops_pool, size=rng.integers(1, 4), replace=False))
        base = str(rng.choice(["base0", "baseseq"]))
        grid = mut.generate_grid({"base": base, "ops": ops, "num_classes": 2})
        for entry in grid.entries:
            if entry.valid:
                M.compile_network(entry.spec, (1, 12, 12), seed=0)
            else:
                with pytest.raises(SpecError):
                    M.compile_network(entry.spec, (1, 12, 12), seed=0)
