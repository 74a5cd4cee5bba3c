import json

import numpy as np
import pytest

from apn import checkpoint
from apn.attention import AttentionConfig, Variant, attention_param_count
from apn.model import (
    APN,
    TOY_BACKBONE,
    ModelSpec,
    arch_names,
    arch_spec,
    build_model,
    count_flops,
    count_params,
    load_checkpoint,
    save_checkpoint,
    toy_spec,
)
from apn.nn import Conv2d
from apn.pyramid import RESNET18, ConfigError, level_param_counts
from apn.tensor import Tensor, no_grad


def _logits(model, x):
    with no_grad():
        return model(Tensor(x)).data


class TestForward:
    def test_toy_embedding_length(self):
        model = build_model(ModelSpec(TOY_BACKBONE, AttentionConfig(Variant.CSCA_ALPHA, 8, 2, 2), 3), seed=0)
        with no_grad():
            emb = model.embed(Tensor(np.zeros((2, 3, 32, 32), np.float32)))
        assert emb.dims == (2, 16)
        assert _logits(model, np.zeros((2, 3, 32, 32), np.float32)).shape == (2, 3)

    def test_default_head_dims(self):
        model = APN(ModelSpec())
        assert model.fc.weight.dims == (98, 1024)
        assert len(model.attention) == 3

    def test_pyramid_dims(self, toy_csca):
        with no_grad():
            feats = toy_csca.pyramid(Tensor(np.zeros((2, 3, 32, 32), np.float32)))
        assert [p.dims for p in feats.p] == [(2, 8, 8, 8), (2, 8, 4, 4)]
        assert feats.up[-1] is None and feats.up[0].dims == feats.x_lat[0].dims

    def test_logits_finite(self, toy_csca):
        rng = np.random.default_rng(0)
        toy_csca.eval()
        for _ in range(100):
            x = rng.normal(0, 3, size=(1, 3, 32, 32)).astype(np.float32)
            assert np.all(np.isfinite(_logits(toy_csca, x)))
        toy_csca.train()

    def test_forced_unit_masks_reproduce_fpn(self):
        rng = np.random.default_rng(0)
        apn = build_model(toy_spec("csca"), seed=0, dtype=np.float64)
        fpn = build_model(toy_spec("none"), seed=0, dtype=np.float64)
        # share every common tensor so only the fusion differs
        shared = dict(apn.state())
        checkpoint.load_into(fpn, [(n, shared[n]) for n, _ in fpn.state()])
        for att in apn.attention:
            att.unit_masks = True
            for conv in (att.post_spa, att.post_sem):
                conv.weight.data[...] = np.eye(8).reshape(8, 8, 1, 1)
                conv.bias.data[...] = 0
        x = rng.normal(size=(2, 3, 32, 32))
        with no_grad():
            pa, pf = apn.pyramid(Tensor(x)), fpn.pyramid(Tensor(x))
        for a, f in zip(pa.p, pf.p):
            assert np.max(np.abs(a.data - f.data)) <= 1e-6


class TestArchitectures:
    def test_names_cover_all_variants(self):
        names = arch_names()
        for v in Variant:
            stem = "fpn" if v is Variant.NONE else f"apn-{v.value}"
            assert f"{stem}18" in names and f"{stem}34" in names

    def test_unknown_arch_lists_valid(self):
        with pytest.raises(ConfigError, match="apn-csca18"):
            arch_spec("resnet50")

    def test_variant_none_is_fpn(self):
        spec = arch_spec("fpn18")
        assert spec.attention.variant is Variant.NONE and len(APN(spec).attention) == 0

    def test_num_classes_floor(self):
        with pytest.raises(ConfigError):
            ModelSpec(num_classes=1)


class TestComplexity:
    def test_single_conv_params(self):
        assert sum(p.data.size for p in Conv2d(2, 4, 3).parameters()) == 76

    def test_totals_equal_breakdown(self):
        report = count_flops(APN(arch_spec("apn-csca18")), (224, 224))
        assert report.total_params == sum(report.params.values())
        assert report.total_flops == sum(report.flops.values())
        doc = json.loads(report.to_json())
        assert doc["total_flops"] == report.total_flops

    @pytest.mark.parametrize("variant", [v for v in Variant if v is not Variant.NONE])
    def test_attention_delta_is_closed_form(self, variant):
        spec = arch_spec(f"apn-{variant.value}18")
        delta = count_params(APN(spec)).total_params - count_params(APN(arch_spec("fpn18"))).total_params
        assert delta == 3 * attention_param_count(spec.attention)

    def test_toy_counts_match_hand_formula(self):
        model = APN(toy_spec("none"))
        c = 8
        stem = 3 * 8 * 9 + 2 * 8
        block1 = 2 * 8 + 8 * 8 * 9 + 2 * 8 + 8 * 8 * 9  # BN, conv, BN, conv (identity shortcut)
        block2 = 2 * 8 + 8 * 16 * 9 + 2 * 16 + 16 * 16 * 9 + 8 * 16  # projection shortcut
        levels = level_param_counts(TOY_BACKBONE)
        fc = 2 * c * 8 + 8
        expected = stem + block1 + block2 + levels["lateral"] + levels["smooth"] + fc
        assert count_params(model).total_params == expected

    def test_backbone_flops_share(self):
        report = count_flops(APN(arch_spec("fpn18")), (224, 224))
        smooth56 = 56 * 56 * 256 * 256 * 9
        assert report.flops["smooth"] == smooth56 + smooth56 // 4 + smooth56 // 16


class TestCheckpoint:
    def test_output_invariant_under_round_trip(self, tmp_path):
        spec = toy_spec("csca-theta-plus")
        model = build_model(spec, seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path, spec)
        x = np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32)
        model.eval()
        back.eval()
        assert _logits(model, x).tobytes() == _logits(back, x).tobytes()
        save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build_model(toy_spec(), seed=0), path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(checkpoint.CheckpointError):
            load_checkpoint(path, toy_spec())

    def test_mismatched_spec_names_tensor(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build_model(toy_spec(num_classes=8), seed=0), path)
        with pytest.raises(checkpoint.CheckpointError, match="fc.weight"):
            load_checkpoint(path, toy_spec(num_classes=4))

    def test_resnet18_reference_spec(self):
        assert arch_spec("apn-csca18").backbone == RESNET18
