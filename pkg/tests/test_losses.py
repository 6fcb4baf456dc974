import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from srface.losses import (
    FocalParams,
    LossError,
    combine,
    focal_loss,
    focal_term,
    smooth_l1,
    sr_l1,
    total_loss,
)


def focal_oracle(p, labels, alpha=0.25, gamma=2.0):
    total, npos = 0.0, 0
    for pi, li in zip(p, labels):
        if li == -1:
            continue
        pi = min(max(pi, 1e-6), 1 - 1e-6)
        if li == 1:
            npos += 1
            total += -alpha * (1 - pi) ** gamma * math.log(pi)
        else:
            total += -(1 - alpha) * pi ** gamma * math.log(1 - pi)
    return total / max(npos, 1)


def smooth_oracle(pred, target):
    total = 0.0
    for row_p, row_t in zip(pred, target):
        for a, b in zip(row_p, row_t):
            d = abs(a - b)
            total += 0.5 * d * d if d < 1 else d - 0.5
    return total / max(len(pred), 1)


def sr_oracle(a, b):
    flat_a, flat_b = a.reshape(-1), b.reshape(-1)
    return sum(abs(x - y) for x, y in zip(flat_a, flat_b)) / len(flat_a)


class TestFocal:
    def test_worked_example(self):
        # positive anchor predicted at 0.9
        assert focal_term(0.9, 0.25, 2.0) == pytest.approx(2.634e-4, abs=1e-7)
        v = focal_loss(torch.tensor([0.9], dtype=torch.float64), torch.tensor([1]))
        assert float(v) == pytest.approx(0.25 * 0.01 * -math.log(0.9), abs=1e-12)

    def test_gamma_zero_is_weighted_ce(self):
        p = torch.tensor([0.3, 0.8], dtype=torch.float64)
        v = focal_loss(p, torch.tensor([1, 0]), FocalParams(0.25, 0.0))
        want = -0.25 * math.log(0.3) - 0.75 * math.log(0.2)
        assert float(v) == pytest.approx(want, abs=1e-12)

    def test_ignored_anchor_contributes_nothing(self):
        p = torch.tensor([0.3, 0.99], dtype=torch.float64)
        a = focal_loss(p, torch.tensor([1, -1]))
        b = focal_loss(p[:1], torch.tensor([1]))
        assert float(a) == float(b)

    def test_no_positives_normalizer_is_one(self):
        p = torch.tensor([0.2, 0.4], dtype=torch.float64)
        v = focal_loss(p, torch.tensor([0, 0]))
        assert float(v) == pytest.approx(focal_oracle([0.2, 0.4], [0, 0]), abs=1e-12)

    def test_saturated_inputs_finite(self):
        p = torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64)
        v = focal_loss(p, torch.tensor([1, 0, 0, 1]))
        assert math.isfinite(float(v))

    def test_nan_rejected(self):
        with pytest.raises(LossError, match="NaN"):
            focal_loss(torch.tensor([float("nan")]), torch.tensor([1]))

    def test_shape_mismatch(self):
        with pytest.raises(LossError, match="shape"):
            focal_loss(torch.tensor([0.5, 0.5]), torch.tensor([1]))

    def test_random_against_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            p = rng.uniform(0, 1, n)
            labels = rng.integers(-1, 2, n)
            got = float(focal_loss(torch.tensor(p), torch.tensor(labels)))
            assert abs(got - focal_oracle(p, labels)) < 1e-6

    @settings(max_examples=100)
    @given(st.floats(1e-3, 1 - 1e-3), st.floats(0.0, 5.0))
    def test_non_negative_and_decreasing(self, p, gamma):
        params = FocalParams(0.25, gamma)
        a = float(focal_loss(torch.tensor([p], dtype=torch.float64), torch.tensor([1]), params))
        b = float(focal_loss(torch.tensor([min(p + 1e-3, 1 - 1e-6)], dtype=torch.float64), torch.tensor([1]), params))
        assert a >= 0
        assert b <= a + 1e-15


class TestSmoothL1:
    def test_hand_values(self):
        t = torch.zeros(1, 4, dtype=torch.float64)
        assert float(smooth_l1(torch.tensor([[0.5, 0, 0, 0]], dtype=torch.float64), t)) == 0.125
        assert float(smooth_l1(torch.tensor([[2.0, 0, 0, 0]], dtype=torch.float64), t)) == 1.5

    def test_continuous_at_one(self):
        t = torch.zeros(1, 1, dtype=torch.float64)
        lo = float(smooth_l1(torch.tensor([[1 - 1e-9]], dtype=torch.float64), t))
        hi = float(smooth_l1(torch.tensor([[1 + 1e-9]], dtype=torch.float64), t))
        assert lo == pytest.approx(0.5, abs=1e-8)
        assert hi == pytest.approx(0.5, abs=1e-8)

    def test_empty(self):
        z = torch.zeros(0, 4)
        assert float(smooth_l1(z, z)) == 0.0

    def test_random_against_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            a, b = rng.normal(0, 2, (n, 4)), rng.normal(0, 2, (n, 4))
            got = float(smooth_l1(torch.tensor(a), torch.tensor(b)))
            assert abs(got - smooth_oracle(a, b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            smooth_l1(torch.zeros(2, 4), torch.zeros(3, 4))


class TestSRL1:
    def test_identical_is_zero(self):
        x = torch.rand(1, 3, 8, 8)
        assert float(sr_l1(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        assert float(sr_l1(x + 0.2, x)) == pytest.approx(0.2, abs=1e-12)

    def test_random_against_oracle(self, rng):
        for _ in range(1000):
            shape = (1, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            a, b = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
            got = float(sr_l1(torch.tensor(a), torch.tensor(b)))
            assert abs(got - sr_oracle(a, b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            sr_l1(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 8, 8))


class TestTotal:
    def test_worked_example(self):
        r = total_loss(0.5, 0.3, 2.0, 0.1)
        assert r.l_ef == pytest.approx(1.0)
        assert r.as_dict()["phi"] == 0.1

    def test_phi_zero(self):
        assert total_loss(0.5, 0.3, 7.0, 0.0).l_ef == pytest.approx(0.8)

    def test_negative_phi(self):
        with pytest.raises(LossError, match="phi"):
            total_loss(0.5, 0.3, 2.0, -0.1)

    def test_non_finite(self):
        with pytest.raises(LossError, match="non-finite"):
            total_loss(float("inf"), 0.3, 2.0, 0.1)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1))
    def test_linear_in_phi(self, f, s, r, phi):
        assert total_loss(f, s, r, phi).l_ef == pytest.approx(f + s + phi * r)

    def test_combine_differentiable(self):
        r = torch.tensor(2.0, requires_grad=True)
        combine(torch.tensor(0.5), torch.tensor(0.3), r, 0.1).backward()
        assert float(r.grad) == pytest.approx(0.1)


class TestGradients:
    """Analytic gradients against central finite differences."""

    def test_focal(self, rng):
        p = torch.tensor(rng.uniform(0.05, 0.95, 12), dtype=torch.float64, requires_grad=True)
        labels = torch.tensor(rng.integers(-1, 2, 12))
        assert torch.autograd.gradcheck(lambda x: focal_loss(x, labels), (p,), eps=1e-6, atol=1e-8, rtol=1e-3)

    def test_smooth_l1_away_from_breakpoint(self, rng):
        d = rng.uniform(0.05, 3.0, (5, 4)) * rng.choice([-1, 1], (5, 4))
        d[np.abs(np.abs(d) - 1) < 0.05] += 0.2
        target = torch.zeros(5, 4, dtype=torch.float64)
        pred = torch.tensor(d, requires_grad=True)
        assert torch.autograd.gradcheck(lambda x: smooth_l1(x, target), (pred,), eps=1e-6, atol=1e-8, rtol=1e-3)

    def test_sr_l1(self, rng):
        a = rng.uniform(0, 1, (1, 3, 4, 4))
        b = a + rng.uniform(0.05, 0.3, a.shape) * rng.choice([-1, 1], a.shape)
        recon = torch.tensor(a, requires_grad=True)
        target = torch.tensor(b)
        assert torch.autograd.gradcheck(lambda x: sr_l1(x, target), (recon,), eps=1e-6, atol=1e-8, rtol=1e-3)
