import numpy as np
import pytest
import torch
import torch.nn as nn

from jointseg.decoder import (
    DualAttention,
    HolisticAttention,
    PredictionPair,
    ResidualChannelAttention,
    SharedDecoder,
)
from jointseg.encoders import TaskEncoder

from oracles import oracle_gaussian_blur


def random_pyramid(b=1, base=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    sizes = [base, base // 2, base // 4, base // 8]
    channels = [256, 512, 1024, 2048]
    return tuple(torch.rand(b, c, s, s, generator=g) for c, s in zip(channels, sizes))


class TestDualAttention:
    def test_zero_input_zero_output(self):
        da = DualAttention(64)
        out = da(torch.zeros(2, 64, 9, 9))
        assert torch.equal(out, torch.zeros(2, 32, 9, 9))

    def test_output_channels_and_grid(self):
        da = DualAttention(512)
        out = da(torch.rand(1, 512, 7, 5))
        assert out.shape == (1, 32, 7, 5)

    def test_batch_permutation_equivariance(self):
        torch.manual_seed(0)
        da = DualAttention(64).eval()
        with torch.no_grad():
            nn.init.normal_(da.position.gamma, 0.5, 0.1)
            nn.init.normal_(da.channel.gamma, 0.5, 0.1)
        x = torch.rand(3, 64, 6, 6)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            assert torch.allclose(da(x[perm]), da(x)[perm], atol=1e-6)


class Ones(nn.Module):
    def forward(self, t):
        return torch.ones(t.shape[0], t.shape[1], 1, 1, dtype=t.dtype)


class TestResidualChannelAttention:
    def test_forced_unit_gate_gives_residual_sum(self):
        torch.manual_seed(1)
        re = ResidualChannelAttention(16)
        re.gate = Ones()
        x = torch.rand(2, 16, 5, 5)
        with torch.no_grad():
            assert torch.allclose(re(x), x + re.body(x), atol=1e-7)

    def test_zero_input_bias_free(self):
        re = ResidualChannelAttention(16, bias=False)
        out = re(torch.zeros(1, 16, 4, 4))
        assert torch.equal(out, torch.zeros_like(out))

    def test_shape_preserved(self):
        re = ResidualChannelAttention(96)
        x = torch.rand(2, 96, 8, 6)
        assert re(x).shape == x.shape


class TestHolisticAttention:
    def test_saturated_map_passes_feature_through(self):
        ha = HolisticAttention()
        f2 = torch.rand(1, 8, 6, 6)
        out = ha(torch.full((1, 1, 6, 6), 80.0), f2)
        assert torch.allclose(out, f2, atol=1e-6)

    def test_constant_map_scales_by_sigmoid(self):
        ha = HolisticAttention()
        f2 = torch.rand(1, 8, 10, 10)
        c = -1.3
        out = ha(torch.full((1, 1, 10, 10), c), f2)
        assert torch.allclose(out, torch.sigmoid(torch.tensor(c)) * f2, atol=1e-6)

    def test_blur_spreads_peak_mass(self):
        ha = HolisticAttention()
        logits = torch.full((1, 1, 7, 7), -2.0)
        logits[0, 0, 3, 3] = 4.0
        attention = torch.sigmoid(logits)[0, 0].numpy()

        # independent direct-convolution oracle with an explicit kernel
        coords = np.arange(31) - 15.0
        k1 = np.exp(-(coords**2) / (2 * 4.0**2))
        kernel = np.outer(k1, k1)
        kernel /= kernel.sum()
        expected_weight = np.maximum(oracle_gaussian_blur(attention, kernel), attention)

        feature = torch.ones(1, 1, 7, 7)
        got_weight = ha(logits, feature)[0, 0].numpy()
        np.testing.assert_allclose(got_weight, expected_weight, atol=1e-5)

        off_peak = got_weight.copy()
        off_peak[3, 3] = np.nan
        sig_off_peak = torch.sigmoid(torch.tensor(-2.0)).item()
        assert np.nanmin(off_peak) > sig_off_peak

    def test_spatial_mismatch_rejected(self):
        ha = HolisticAttention()
        with pytest.raises(ValueError):
            ha(torch.zeros(1, 1, 4, 4), torch.zeros(1, 8, 6, 6))


@pytest.fixture(scope="module")
def decoder():
    torch.manual_seed(2)
    return SharedDecoder().eval()


class TestSharedDecoder:
    def test_full_resolution_outputs_352(self, decoder):
        torch.manual_seed(3)
        encoder = TaskEncoder().eval()
        with torch.no_grad():
            pair = decoder(encoder(torch.rand(1, 3, 352, 352)))
        assert pair.init_logits.shape == (1, 1, 352, 352)
        assert pair.refined_logits.shape == (1, 1, 352, 352)
        assert torch.isfinite(pair.init_logits).all() and torch.isfinite(pair.refined_logits).all()

    def test_output_matches_input_resolution_64(self, decoder):
        with torch.no_grad():
            pair = decoder(random_pyramid(base=16))
        assert pair.refined_logits.shape[-2:] == (64, 64)

    def test_deterministic(self, decoder):
        pyramid = random_pyramid(base=8, seed=5)
        with torch.no_grad():
            a = decoder(pyramid)
            b = decoder(pyramid)
        assert torch.equal(a.init_logits, b.init_logits)
        assert torch.equal(a.refined_logits, b.refined_logits)

    def test_invalid_pyramid_rejected(self, decoder):
        bad = list(random_pyramid(base=8))
        bad[0] = torch.rand(1, 128, 8, 8)
        with pytest.raises(ValueError):
            decoder(tuple(bad))

    def test_shared_parameters_couple_both_tasks(self, decoder):
        pyramid_s = random_pyramid(base=8, seed=6)
        pyramid_c = random_pyramid(base=8, seed=7)
        with torch.no_grad():
            before_s = decoder(pyramid_s).refined_logits.clone()
            before_c = decoder(pyramid_c).refined_logits.clone()
            decoder.cla_ref.weight.add_(0.05)
            after_s = decoder(pyramid_s).refined_logits
            after_c = decoder(pyramid_c).refined_logits
            decoder.cla_ref.weight.sub_(0.05)
        assert not torch.equal(before_s, after_s)
        assert not torch.equal(before_c, after_c)

    def test_fusion_convolutions_emit_32_channels(self, decoder):
        for name in ("conv43_init", "conv43_ref", "conv432_ref", "conv_f1"):
            assert getattr(decoder, name).out_channels == 32
        for name in ("da4_init", "da3_init", "da2_init", "da4_ref", "da3_ref", "da2_ref"):
            assert getattr(decoder, name).fuse.out_channels == 32

    def test_prediction_pair_fields(self, decoder):
        with torch.no_grad():
            pair = decoder(random_pyramid(base=8, seed=8))
        assert isinstance(pair, PredictionPair)
