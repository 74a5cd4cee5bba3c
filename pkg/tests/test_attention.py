import numpy as np
import pytest

from apn import ops
from apn.attention import (
    AttentionConfig,
    CompetitiveAttention,
    FusionAttention,
    SpatialCollaborativeAttention,
    Variant,
    attention_param_count,
    build_attention,
    ca_forward,
    ca_scale,
    csca_combine,
    parameter_groups,
)
from apn.gradsuite import E2E_TOL, check_attention
from apn.nn import Conv2d
from apn.pyramid import ConfigError, fpn_fuse
from apn.tensor import ShapeError, Tensor, no_grad

ALL = list(Variant)
WITH_ATTENTION = [v for v in Variant if v is not Variant.NONE]
WITH_SCA = [v for v in Variant if v.sca_kind]


def _flows(rng, n=2, c=4, hw=8):
    return Tensor(rng.normal(size=(n, c, hw, hw))), Tensor(rng.normal(size=(n, c, hw, hw)))


def _module(variant, c=4, t=2, r=2, seed=0):
    att = build_attention(AttentionConfig(variant, c, t, r), seed=seed)
    att.to(np.float64)
    return att


def _identity_post(conv: Conv2d):
    c = conv.cout
    conv.weight.data[...] = np.eye(c).reshape(c, c, 1, 1)
    conv.bias.data[...] = 0


class TestConfig:
    def test_parse_aliases(self):
        assert Variant.parse("csca-alpha") is Variant.CSCA_ALPHA
        assert Variant.parse("FPN") is Variant.NONE
        assert Variant.parse("csca_theta_plus") is Variant.CSCA_THETA_PLUS

    def test_unknown_variant_lists_valid(self):
        with pytest.raises(ConfigError, match="csca-theta"):
            Variant.parse("cbam")

    def test_ratio_to_zero(self):
        with pytest.raises(ConfigError):
            AttentionConfig(Variant.CA, channels=4, t=16)
        with pytest.raises(ConfigError):
            AttentionConfig(Variant.SCA_THETA, channels=4, r=8)

    def test_indivisible_ratio_warns(self):
        with pytest.warns(UserWarning):
            AttentionConfig(Variant.SCA_THETA, channels=10, r=4)


class TestCompetitiveAttention:
    def test_dims_and_range(self, rng):
        ca = CompetitiveAttention(4, 2)
        ca.init_parameters(0)
        ca.to(np.float64)
        x, u = _flows(rng)
        s_spa, s_sem = ca(x, u)
        assert s_spa.dims == s_sem.dims == (2, 4, 1, 1)
        for s in (s_spa, s_sem):
            assert np.all((s.data > 0) & (s.data < 1))

    def test_reference_fc_dims(self):
        ca = CompetitiveAttention(256, 16)
        assert ca.fc1.weight.dims == (32, 512)
        assert ca.fc2.weight.dims == (512, 32)

    def test_zero_weights_give_half(self, rng):
        ca = CompetitiveAttention(4, 2)
        ca.init_parameters(0)
        ca.to(np.float64)
        ca.fc1.weight.data[...] = 0
        ca.fc2.weight.data[...] = 0
        ca.eval()  # running stats 0 / 1: BN is the identity up to eps
        s_spa, s_sem = ca_forward(*_flows(rng), ca)
        np.testing.assert_allclose(s_spa.data, 0.5)
        np.testing.assert_allclose(s_sem.data, 0.5)

    def test_split_order(self, rng):
        # the first C excitation outputs scale the lateral flow
        ca = CompetitiveAttention(2, 1)
        ca.init_parameters(0)
        ca.to(np.float64)
        ca.eval()
        ca.fc2.weight.data[...] = 0
        ca.fc2.bias.data[...] = [5.0, 5.0, -5.0, -5.0]
        s_spa, s_sem = ca_forward(*_flows(rng, c=2), ca)
        assert np.all(s_spa.data > 0.99) and np.all(s_sem.data < 0.01)

    def test_dims_mismatch(self, rng):
        ca = CompetitiveAttention(4, 2)
        with pytest.raises(ShapeError):
            ca(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))))

    def test_scale_identities(self, rng):
        x, u = _flows(rng)
        ones, half = Tensor(np.ones((2, 4, 1, 1))), Tensor(np.full((2, 4, 1, 1), 0.5))
        np.testing.assert_allclose(ca_scale(x, u, ones, ones).data, fpn_fuse(x, u).data, atol=1e-15)
        np.testing.assert_allclose(ca_scale(x, u, half, half).data, 0.5 * fpn_fuse(x, u).data, atol=1e-15)


class TestSpatialAttention:
    @pytest.mark.parametrize("kind", ["alpha", "theta", "theta_plus"])
    @pytest.mark.parametrize("hw", [7, 8])
    def test_mask_dims_and_range(self, rng, kind, hw):
        sca = SpatialCollaborativeAttention(4, kind, 2)
        sca.init_parameters(0)
        sca.to(np.float64)
        xi1, xi2 = sca(*_flows(rng, hw=hw))
        assert xi1.dims == xi2.dims == (2, 1, hw, hw)
        for m in (xi1, xi2):
            assert np.all((m.data > 0) & (m.data < 1))

    def test_alpha_downsamples_seven_to_four(self):
        sca = SpatialCollaborativeAttention(4, "alpha")
        assert sca.down.output_hw(7, 7) == (4, 4)

    def test_theta_squeeze_width(self):
        sca = SpatialCollaborativeAttention(256, "theta", 8)
        assert sca.squeeze_spa.weight.dims == (32, 256, 1, 1)
        plus = SpatialCollaborativeAttention(256, "theta_plus", 8)
        assert plus.down.weight.dims == (64, 64, 3, 3)
        assert plus.down.output_hw(7, 7) == (4, 4)

    def test_theta_plus_without_sigmoid_is_unbounded(self, rng):
        sca = SpatialCollaborativeAttention(4, "theta_plus", 2, sigmoid=False)
        sca.init_parameters(0)
        sca.to(np.float64)
        xi1, _ = sca(*_flows(rng))
        assert xi1.data.min() < 0 or xi1.data.max() > 1

    def test_constant_inputs_constant_away_from_padded_border(self):
        # zero padding of the stride-2 conv only reaches the first output
        # row/column; bilinear upsampling spreads that to three pixels
        sca = SpatialCollaborativeAttention(4, "alpha")
        sca.init_parameters(0)
        sca.to(np.float64)
        sca.eval()
        x = Tensor(np.full((1, 4, 8, 8), 0.7))
        u = Tensor(np.full((1, 4, 8, 8), -0.2))
        for m in sca(x, u):
            interior = m.data[0, 0, 3:, 3:]
            assert np.ptp(interior) <= 1e-12


class TestFusion:
    @pytest.mark.parametrize("seed", range(20))
    def test_csca_unit_masks_identity_post_is_fpn(self, seed):
        rng = np.random.default_rng(seed)
        att = _module(Variant.CSCA_ALPHA, seed=seed)
        _identity_post(att.post_spa)
        _identity_post(att.post_sem)
        att.unit_masks = True
        x, u = _flows(rng)
        assert np.max(np.abs(att(x, u).data - fpn_fuse(x, u).data)) <= 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_ca_unit_weights_is_fpn(self, seed):
        rng = np.random.default_rng(seed)
        att = _module(Variant.CA, seed=seed)
        att.unit_masks = True
        x, u = _flows(rng)
        assert np.max(np.abs(att(x, u).data - fpn_fuse(x, u).data)) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_csca_with_unit_pixel_masks_is_ca(self, seed):
        rng = np.random.default_rng(seed)
        att = _module(Variant.CSCA_ALPHA, seed=seed)
        _identity_post(att.post_spa)
        _identity_post(att.post_sem)
        x, u = _flows(rng)
        s_spa, s_sem = att.ca(x, u)
        ones = Tensor(np.ones((2, 1, 8, 8)))
        combined = csca_combine(x, u, s_spa, s_sem, ones, ones, att.post_spa, att.post_sem)
        assert np.max(np.abs(combined.data - ca_scale(x, u, s_spa, s_sem).data)) <= 1e-6

    def test_broadcast_outer_product(self):
        s = Tensor(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
        xi = Tensor(np.array([[1.0, 5.0], [7.0, 11.0]]).reshape(1, 1, 2, 2))
        m = ops.mul(xi, s).data
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    assert m[0, c, i, j] == s.data[0, c, 0, 0] * xi.data[0, 0, i, j]

    @pytest.mark.parametrize("variant", WITH_ATTENTION)
    def test_batch_permutation_equivariance(self, rng, variant):
        att = _module(variant)
        att.eval()
        att.record = True
        x, u = _flows(rng, n=3)
        perm = [2, 0, 1]
        with no_grad():
            out = att(x, u).data
            masks = dict(att.last)
            out_p = att(Tensor(x.data[perm]), Tensor(u.data[perm])).data
        np.testing.assert_array_equal(out_p, out[perm])
        for key, value in att.last.items():
            np.testing.assert_array_equal(value, masks[key][perm])

    @pytest.mark.parametrize("variant", WITH_ATTENTION)
    def test_activations_in_open_unit_interval(self, rng, variant):
        att = _module(variant)
        att.record = True
        att(*_flows(rng))
        for value in att.last.values():
            assert np.all((value > 0) & (value < 1))

    @pytest.mark.parametrize("variant", ALL)
    def test_end_to_end_gradients(self, variant):
        assert check_attention(variant, seed=0) <= E2E_TOL


class TestBuild:
    def test_none_has_no_module(self):
        assert build_attention(AttentionConfig(Variant.NONE, 256)) is None

    def test_csca_alpha_groups(self):
        att = build_attention(AttentionConfig(Variant.CSCA_ALPHA, 256, 16, 8))
        assert len(parameter_groups(att)) == 10

    def test_csca_alpha_count(self):
        cfg = AttentionConfig(Variant.CSCA_ALPHA, 256, 16, 8)
        assert attention_param_count(cfg) == 165_968
        # two fc layers, the 3x3 and 1x1 convs, two post 1x1s: about 164k
        assert abs(attention_param_count(cfg) - 164e3) / 164e3 < 0.02

    @pytest.mark.parametrize("variant", WITH_ATTENTION)
    @pytest.mark.parametrize("c,t,r", [(256, 16, 8), (8, 2, 2), (12, 3, 4)])
    def test_closed_form_matches_registered(self, variant, c, t, r):
        cfg = AttentionConfig(variant, c, t, r)
        att = FusionAttention(cfg)
        assert attention_param_count(cfg) == sum(p.data.size for p in att.parameters())

    def test_same_seed_bitwise(self):
        cfg = AttentionConfig(Variant.CSCA_THETA_PLUS, 16, 4, 4)
        a, b = build_attention(cfg, seed=9), build_attention(cfg, seed=9)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()
