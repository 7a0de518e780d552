import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointseg import losses
from jointseg.losses import EdgeWeightConfig, LossWeights

from oracles import (
    oracle_boundary_iou,
    oracle_edge_weight,
    oracle_structure_loss,
    oracle_weighted_ce,
    sigmoid,
)

CFG4 = EdgeWeightConfig(pool_kernel=31)


def t(arr):
    return torch.as_tensor(np.asarray(arr), dtype=torch.float64).reshape(1, 1, *np.shape(arr))


class TestEdgeWeight:
    def test_constant_masks_give_unit_weight(self):
        for value in (0.0, 1.0):
            y = torch.full((2, 1, 40, 40), value, dtype=torch.float64)
            w = losses.edge_weight(y)
            assert torch.allclose(w, torch.ones_like(w))

    def test_single_pixel_peak(self):
        y = np.zeros((63, 63))
        y[31, 31] = 1.0
        w = losses.edge_weight(t(y))
        expected = 1.0 + 5.0 * (1.0 - 1.0 / 961.0)
        assert w[0, 0, 31, 31].item() == pytest.approx(expected, abs=1e-9)

    def test_matches_oracle_on_random_masks(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            y = (rng.random((4, 4)) > 0.5).astype(np.float64)
            got = losses.edge_weight(t(y)).squeeze().numpy()
            np.testing.assert_allclose(got, oracle_edge_weight(y), atol=1e-6)

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError):
            losses.edge_weight(torch.full((1, 1, 4, 4), 0.3))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_range_one_to_six(self, seed):
        rng = np.random.default_rng(seed)
        y = (rng.random((6, 6)) > rng.random()).astype(np.float64)
        w = losses.edge_weight(t(y))
        assert (w >= 1.0).all() and (w <= 6.0).all()


class TestWeightedCE:
    def test_saturated_correct_is_zero(self):
        y = t([[1.0, 0.0], [0.0, 1.0]])
        logits = (y * 2 - 1) * 50.0
        assert losses.weighted_ce(logits, y, torch.ones_like(y)).item() < 1e-6

    def test_uniform_half_probability_is_ln2(self):
        y = t([[1.0, 0.0], [0.0, 1.0]])
        val = losses.weighted_ce(torch.zeros_like(y), y, torch.ones_like(y))
        assert val.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_weight_rescaling_invariance(self):
        rng = np.random.default_rng(2)
        y = t((rng.random((4, 4)) > 0.5).astype(np.float64))
        logits = t(rng.normal(size=(4, 4)))
        w = t(rng.random((4, 4)) + 0.5)
        a = losses.weighted_ce(logits, y, w)
        b = losses.weighted_ce(logits, y, 2.0 * w)
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            y = (rng.random((4, 4)) > 0.5).astype(np.float64)
            logits = rng.normal(size=(4, 4))
            w = rng.random((4, 4)) + 0.5
            got = losses.weighted_ce(t(logits), t(y), t(w)).item()
            assert got == pytest.approx(oracle_weighted_ce(logits, y, w), abs=1e-6)

    def test_nan_logits_rejected(self):
        y = t([[1.0]])
        bad = t([[float("nan")]])
        with pytest.raises(ValueError):
            losses.weighted_ce(bad, y, torch.ones_like(y))


class TestBoundaryIoU:
    def test_perfect_ones_prediction(self):
        y = torch.ones(1, 1, 3, 3, dtype=torch.float64)
        assert losses.boundary_iou(y, y, torch.ones_like(y)).item() == 0.0

    def test_zero_prediction_on_four_ones(self):
        y = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        val = losses.boundary_iou(torch.zeros_like(y), y, torch.ones_like(y))
        assert val.item() == pytest.approx(0.8, abs=1e-12)

    def test_exact_binary_match_zero_for_any_weight(self):
        rng = np.random.default_rng(4)
        y = t((rng.random((5, 5)) > 0.5).astype(np.float64))
        w = t(rng.random((5, 5)) * 4 + 1)
        assert losses.boundary_iou(y, y, w).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            y = (rng.random((4, 4)) > 0.5).astype(np.float64)
            prob = rng.random((4, 4))
            w = rng.random((4, 4)) + 0.5
            got = losses.boundary_iou(t(prob), t(y), t(w)).item()
            assert got == pytest.approx(oracle_boundary_iou(prob, y, w), abs=1e-6)

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=20, deadline=None)
    def test_smoothless_ratio_invariant_to_weight_scale(self, scale):
        rng = np.random.default_rng(6)
        y = t((rng.random((4, 4)) > 0.4).astype(np.float64))
        prob = t(rng.random((4, 4)))
        w = t(rng.random((4, 4)) + 0.5)
        a = losses.boundary_iou(prob, y, w, smooth=0.0)
        b = losses.boundary_iou(prob, y, scale * w, smooth=0.0)
        assert a.item() == pytest.approx(b.item(), abs=1e-6)


class TestStructureLoss:
    def test_perfect_prediction_is_zero(self):
        y = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        y[0, 0, 2:6, 2:6] = 1.0
        logits = (y * 2 - 1) * 40.0
        assert losses.structure_loss(logits, y).item() < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            y = t((rng.random((4, 4)) > 0.5).astype(np.float64))
            logits = t(rng.normal(size=(4, 4)))
            assert losses.structure_loss(logits, y).item() >= 0.0

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            y = (rng.random((4, 4)) > 0.5).astype(np.float64)
            logits = rng.normal(size=(4, 4))
            got = losses.structure_loss(t(logits), t(y)).item()
            assert got == pytest.approx(oracle_structure_loss(logits, y), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        y = t((rng.random((4, 4)) > 0.5).astype(np.float64))
        logits = torch.tensor(rng.normal(size=(1, 1, 4, 4)), dtype=torch.float64, requires_grad=True)
        losses.structure_loss(logits, y).backward()
        analytic = logits.grad.detach().numpy().ravel()

        h = 1e-4
        flat = logits.detach().numpy().ravel().copy()
        fd = np.zeros_like(flat)
        for k in range(flat.size):
            for sign, out in ((+1, 0), (-1, 1)):
                shifted = flat.copy()
                shifted[k] += sign * h
                val = losses.structure_loss(
                    torch.tensor(shifted.reshape(1, 1, 4, 4), dtype=torch.float64), y
                ).item()
                if sign > 0:
                    hi = val
                else:
                    lo = val
            fd[k] = (hi - lo) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert np.max(np.abs(analytic - fd) / denom) <= 1e-3


class TestTaskStructureLoss:
    class Pair:
        def __init__(self, init_logits, refined_logits):
            self.init_logits = init_logits
            self.refined_logits = refined_logits

    def test_both_perfect_is_zero(self):
        y = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
        y[0, 0, 1:4, 1:4] = 1.0
        logits = (y * 2 - 1) * 40.0
        assert losses.task_structure_loss(self.Pair(logits, logits), y).item() < 1e-6

    def test_half_weighting(self):
        rng = np.random.default_rng(10)
        y = t((rng.random((4, 4)) > 0.5).astype(np.float64))
        perfect = (y * 2 - 1) * 40.0
        noisy = t(rng.normal(size=(4, 4)))
        single = losses.structure_loss(noisy, y).item()
        combined = losses.task_structure_loss(self.Pair(perfect, noisy), y).item()
        assert combined == pytest.approx(0.5 * single, abs=1e-6)

    def test_equals_mean_of_structure_losses(self):
        rng = np.random.default_rng(11)
        y = t((rng.random((4, 4)) > 0.5).astype(np.float64))
        a = t(rng.normal(size=(4, 4)))
        b = t(rng.normal(size=(4, 4)))
        expected = 0.5 * (oracle_structure_loss(a.squeeze().numpy(), y.squeeze().numpy())
                          + oracle_structure_loss(b.squeeze().numpy(), y.squeeze().numpy()))
        assert losses.task_structure_loss(self.Pair(a, b), y).item() == pytest.approx(expected, abs=1e-6)


class TestAdversarialLosses:
    def test_generator_loss_extremes(self):
        conf = torch.full((1, 1, 4, 4), 60.0, dtype=torch.float64)
        assert losses.generator_adv_loss(conf).item() < 1e-6
        conf = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        assert losses.generator_adv_loss(conf).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_generator_loss_strictly_decreasing_per_entry(self):
        conf = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        base = losses.generator_adv_loss(conf).item()
        for idx in range(4):
            bumped = conf.clone().view(-1)
            bumped[idx] += 0.5
            assert losses.generator_adv_loss(bumped.view(1, 1, 2, 2)).item() < base

    def test_discriminator_loss_extremes(self):
        pred = torch.full((1, 1, 3, 3), -60.0, dtype=torch.float64)
        gt = torch.full((1, 1, 3, 3), 60.0, dtype=torch.float64)
        assert losses.discriminator_loss(pred, gt).item() < 1e-6
        zero = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        assert losses.discriminator_loss(zero, zero).item() == pytest.approx(2 * math.log(2.0), abs=1e-9)

    def test_discriminator_loss_swap_symmetry(self):
        rng = np.random.default_rng(12)
        a = t(rng.normal(size=(3, 3)))
        b = t(rng.normal(size=(3, 3)))
        # swapping inputs AND targets means scoring -a as gt and -b as pred
        assert losses.discriminator_loss(a, b).item() == pytest.approx(
            losses.discriminator_loss(-b, -a).item(), abs=1e-9
        )


class TestCompositeObjectives:
    def test_zero_lambda_reduces_to_structure(self):
        w = LossWeights(lambda1=0.0, lambda2=0.0)
        l_sod, l_cod, l_conf = losses.composite_objectives(
            torch.tensor(0.7), torch.tensor(5.0), torch.tensor(0.3), torch.tensor(4.0),
            torch.tensor(1.0), torch.tensor(2.0), w)
        assert l_sod.item() == pytest.approx(0.7)
        assert l_cod.item() == pytest.approx(0.3)
        assert l_conf.item() == pytest.approx(3.0)

    def test_default_tradeoffs(self):
        w = LossWeights()
        assert w.lambda1 == 0.01 and w.lambda2 == 0.01 and w.latent_weight == 0.1

    def test_lambda_linearity(self):
        def parts(lam):
            one = torch.tensor(1.0, dtype=torch.float64)
            two = torch.tensor(2.0, dtype=torch.float64)
            zero = torch.tensor(0.0, dtype=torch.float64)
            return losses.composite_objectives(
                one, two, one, two, zero, zero, LossWeights(lambda1=lam, lambda2=lam))

        base, doubled = parts(0.01), parts(0.02)
        assert (doubled[0] - base[0]).item() == pytest.approx(0.01 * 2.0, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)
