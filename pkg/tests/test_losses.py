"""Tests for BCE, soft Dice and their sum."""

import math

import pytest
import torch

from src.errors import ShapeMismatch
from src.losses import bce_loss, dice_loss, total_loss


def _t(values, dtype=torch.float64):
    return torch.tensor(values, dtype=dtype).reshape(1, 1, 1, -1)


class TestBCE:
    def test_perfect_prediction_is_near_zero(self):
        y = _t([1.0, 0.0, 1.0, 0.0])
        assert float(bce_loss(y.clone(), y)) <= 1e-6

    def test_half_probability_is_ln2(self):
        p = torch.full((2, 1, 4, 4), 0.5, dtype=torch.float64)
        y = (torch.arange(32, dtype=torch.float64).reshape(2, 1, 4, 4) % 3 == 0).double()
        assert abs(float(bce_loss(p, y)) - math.log(2)) <= 1e-9

    def test_two_pixel_example(self):
        loss = bce_loss(_t([0.9, 0.2]), _t([1.0, 0.0]))
        assert float(loss) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
        assert float(loss) == pytest.approx(0.164252, abs=1e-6)

    def test_clamped_extremes_stay_finite(self):
        loss = bce_loss(_t([0.0, 1.0]), _t([1.0, 0.0]))
        assert math.isfinite(float(loss))
        assert float(loss) == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            bce_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


class TestDice:
    def test_perfect_overlap(self):
        y = _t([1.0, 1.0, 1.0, 1.0, 0.0])
        assert float(dice_loss(y.clone(), y)) == 0.0

    def test_empty_prediction(self):
        assert float(dice_loss(_t([0.0] * 4), _t([1.0] * 4))) == pytest.approx(0.8, abs=1e-12)

    def test_both_empty(self):
        assert float(dice_loss(_t([0.0] * 4), _t([0.0] * 4))) == 0.0

    def test_symmetric_for_binary_masks(self):
        a, b = _t([1.0, 0.0, 1.0, 1.0]), _t([0.0, 0.0, 1.0, 1.0])
        assert float(dice_loss(a, b)) == float(dice_loss(b, a))

    def test_sums_over_whole_batch(self):
        p = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
        y = torch.zeros_like(p)
        y[0] = 1.0
        # batch-level: 1 - 1 / (0 + 4 + 1)
        assert float(dice_loss(p, y)) == pytest.approx(0.8, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_loss(torch.zeros(1, 1, 2, 2), torch.zeros(2, 1, 2, 2))


class TestTotalLoss:
    def test_worked_example(self):
        p, y = _t([0.5] * 4), _t([1.0] * 4)
        value = total_loss(p, y)
        assert float(value.bce) == pytest.approx(math.log(2), abs=1e-9)
        assert float(value.dice_loss) == pytest.approx(2 / 7, abs=1e-12)
        assert float(value.total) == pytest.approx(0.978861, abs=1e-6)

    def test_total_is_sum(self):
        p = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(0))
        y = (torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(1)) > 0.7).float()
        value = total_loss(p, y)
        assert torch.equal(value.total, value.bce + value.dice_loss)

    def test_perfect_prediction(self):
        y = _t([1.0, 0.0, 0.0, 1.0])
        assert float(total_loss(y.clone(), y).total) <= 1e-6

    def test_to_dict_floats(self):
        d = total_loss(_t([0.5] * 4), _t([1.0] * 4)).to_dict()
        assert set(d) == {"bce", "dice_loss", "total"}
        assert all(isinstance(v, float) for v in d.values())

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        probs = (0.1 + 0.8 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)).requires_grad_()
        targets = (torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(
            lambda p: total_loss(p, targets).total, (probs,), eps=1e-6, atol=1e-8, rtol=1e-5
        )
