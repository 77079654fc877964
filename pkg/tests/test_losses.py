"""Loss terms against brute-force oracles, plus the ramp schedule."""
import math

import numpy as np
import pytest
import torch

from midshift.losses import (
    LossWeights,
    ceiling_loss,
    combine_losses,
    huber_loss,
    ramp_weight,
    smoothness_loss,
    warp_consistency_loss,
)


# --- oracles: naive float64 loops, no torch ---------------------------------


def huber_oracle(pred: np.ndarray, target: np.ndarray, cutoff: float) -> float:
    total = 0.0
    for d in (pred.astype(np.float64) - target.astype(np.float64)).ravel():
        a = abs(d)
        total += a if a >= cutoff else (d * d + cutoff * cutoff) / (2.0 * cutoff)
    return total


def smoothness_oracle(field: np.ndarray) -> float:
    _, h, w = field.shape
    total = 0.0
    for j in range(h):
        for k in range(w):
            if j > 0:
                dy = field[0, j, k] - field[0, j - 1, k]
                dx = field[1, j, k] - field[1, j - 1, k]
                total += dy * dy + dx * dx
            if k > 0:
                dy = field[0, j, k] - field[0, j, k - 1]
                dx = field[1, j, k] - field[1, j, k - 1]
                total += dy * dy + dx * dx
    return total


def ceiling_oracle(field: np.ndarray, max_norm: float) -> float:
    _, h, w = field.shape
    total = 0.0
    for j in range(h):
        for k in range(w):
            n = math.hypot(field[0, j, k], field[1, j, k])
            if n > max_norm:
                total += n - max_norm
    return total


def shift_warp_oracle(image: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Nearest-neighbor warp for constant integer fields, border clamped."""
    c, h, w = image.shape
    out = np.empty_like(image)
    for j in range(h):
        for k in range(w):
            out[:, j, k] = image[:, min(max(j + dr, 0), h - 1), min(max(k + dc, 0), w - 1)]
    return out


class TestHuber:
    def test_equal_vectors_cost_the_cutoff(self):
        out = huber_loss(torch.tensor([1.0, -2.0]), torch.tensor([1.0, -2.0]))
        assert float(out) == 3.0

    def test_large_difference_is_absolute(self):
        assert float(huber_loss(torch.tensor([5.0]), torch.tensor([0.0]))) == 5.0

    def test_branches_meet_at_the_cutoff(self):
        linear = float(huber_loss(torch.tensor([3.0]), torch.tensor([0.0])))
        quadratic = (3.0**2 + 3.0**2) / (2 * 3.0)
        assert linear == 3.0 == quadratic

    def test_one_sided_slopes_at_the_cutoff_both_one(self):
        h = 1e-3

        def f(d):
            return float(huber_loss(torch.tensor([d], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)))

        above = (f(3.0 + h) - f(3.0)) / h
        below = (f(3.0) - f(3.0 - h)) / h
        assert abs(above - 1.0) < 1e-3
        assert abs(below - 1.0) < 1e-3

    def test_symmetric_in_its_arguments(self):
        rng = np.random.default_rng(0)
        a = torch.from_numpy(rng.standard_normal(2) * 4)
        b = torch.from_numpy(rng.standard_normal(2) * 4)
        assert float(huber_loss(a, b)) == float(huber_loss(b, a))

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred = rng.standard_normal(2) * 6
            target = rng.standard_normal(2) * 6
            cutoff = float(rng.uniform(0.5, 5.0))
            got = float(huber_loss(torch.from_numpy(pred), torch.from_numpy(target), cutoff))
            assert abs(got - huber_oracle(pred, target, cutoff)) < 1e-9

    def test_batched_sums_only_the_last_axis(self):
        pred = torch.tensor([[5.0, 0.0], [0.0, 0.0]])
        target = torch.zeros(2, 2)
        out = huber_loss(pred, target)
        assert out.shape == (2,)
        assert out.tolist() == [6.5, 3.0]

    def test_gradient_matches_finite_differences(self):
        pred = torch.tensor([4.0, 1.0], dtype=torch.float64, requires_grad=True)
        target = torch.tensor([0.0, 0.0], dtype=torch.float64)
        huber_loss(pred, target).backward()
        h = 1e-3
        for i in range(2):
            up = pred.detach().clone()
            up[i] += h
            down = pred.detach().clone()
            down[i] -= h
            fd = (float(huber_loss(up, target)) - float(huber_loss(down, target))) / (2 * h)
            assert abs(fd - float(pred.grad[i])) / abs(fd) < 1e-4

    def test_rejects_non_positive_cutoff(self):
        with pytest.raises(ValueError, match="cutoff"):
            huber_loss(torch.zeros(2), torch.zeros(2), 0.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            huber_loss(torch.zeros(2), torch.zeros(3))


class TestSmoothness:
    def test_constant_field_costs_nothing(self):
        field = torch.full((2, 6, 6), 3.7)
        assert float(smoothness_loss(field)) == 0.0

    def test_two_by_two_hand_value(self):
        field = torch.zeros(2, 2, 2)
        field[0, 0, 1] = 1.0
        field[0, 1, 1] = 1.0
        assert float(smoothness_loss(field)) == 2.0

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            field = rng.standard_normal((2, 5, 7))
            got = float(smoothness_loss(torch.from_numpy(field)))
            assert abs(got - smoothness_oracle(field)) < 1e-9

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(3)
        fields = torch.from_numpy(rng.standard_normal((3, 2, 6, 6)))
        out = smoothness_loss(fields)
        assert out.shape == (3,)
        for i in range(3):
            assert float(out[i]) == float(smoothness_loss(fields[i]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        field = torch.from_numpy(rng.standard_normal((2, 8, 8))).requires_grad_(True)
        smoothness_loss(field).backward()
        h = 1e-3
        for idx in [(0, 3, 3), (1, 0, 0), (0, 7, 4)]:
            up = field.detach().clone()
            up[idx] += h
            down = field.detach().clone()
            down[idx] -= h
            fd = (float(smoothness_loss(up)) - float(smoothness_loss(down))) / (2 * h)
            assert abs(fd - float(field.grad[idx])) / max(abs(fd), 1e-9) < 1e-4

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError, match="field"):
            smoothness_loss(torch.zeros(2, 2))


class TestWarpConsistency:
    def test_identity_pair_costs_nothing(self):
        rng = np.random.default_rng(5)
        img = torch.from_numpy(rng.standard_normal((1, 8, 8)))
        assert float(warp_consistency_loss(img, img, torch.zeros(2, 8, 8, dtype=torch.float64))) == 0.0

    def test_integer_shift_cancels_up_to_border(self):
        rng = np.random.default_rng(6)
        h, w = 16, 12
        tall = rng.uniform(0.0, 1.0, size=(1, h + 2, w))
        generated = torch.from_numpy(tall[:, :h])
        observed = torch.from_numpy(tall[:, 2 : h + 2])
        disp = torch.zeros(2, h, w, dtype=torch.float64)
        disp[0] = 2.0
        loss = float(warp_consistency_loss(observed, generated, disp))
        assert loss <= (4.0 * w) / (h * w) * 1.0**2
        interior = warp_consistency_loss(
            observed[:, : h - 2], generated[:, 2:h], torch.zeros(2, h - 2, w, dtype=torch.float64)
        )
        assert float(interior) == 0.0

    def test_matches_independent_nearest_neighbor_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            img = rng.standard_normal((1, 9, 9))
            obs = rng.standard_normal((1, 9, 9))
            dr, dc = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
            disp = torch.zeros(2, 9, 9, dtype=torch.float64)
            disp[0] = dr
            disp[1] = dc
            got = float(warp_consistency_loss(torch.from_numpy(obs), torch.from_numpy(img), disp))
            expected = float(((shift_warp_oracle(img, dr, dc) - obs) ** 2).mean())
            assert abs(got - expected) < 1e-6

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(8)
        obs = torch.from_numpy(rng.standard_normal((3, 1, 8, 8)))
        gen = torch.from_numpy(rng.standard_normal((3, 1, 8, 8)))
        disp = torch.from_numpy(rng.standard_normal((3, 2, 8, 8)) * 0.5)
        out = warp_consistency_loss(obs, gen, disp)
        assert out.shape == (3,)
        for i in range(3):
            assert math.isclose(float(out[i]), float(warp_consistency_loss(obs[i], gen[i], disp[i])), rel_tol=1e-12)

    def test_gradient_wrt_field_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        from scipy import ndimage

        obs = torch.from_numpy(ndimage.gaussian_filter(rng.standard_normal((8, 8)), 1.5))[None]
        gen = torch.from_numpy(ndimage.gaussian_filter(rng.standard_normal((8, 8)), 1.5))[None]
        disp = (torch.from_numpy(rng.standard_normal((2, 8, 8)) * 0.3) + 0.25).requires_grad_(True)
        warp_consistency_loss(obs, gen, disp).backward()
        h = 1e-3
        for idx in [(0, 3, 3), (1, 5, 2)]:
            up = disp.detach().clone()
            up[idx] += h
            down = disp.detach().clone()
            down[idx] -= h
            fd = (
                float(warp_consistency_loss(obs, gen, up))
                - float(warp_consistency_loss(obs, gen, down))
            ) / (2 * h)
            assert abs(fd - float(disp.grad[idx])) / max(abs(fd), 1e-9) < 1e-4

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            warp_consistency_loss(torch.zeros(1, 8, 8), torch.zeros(1, 8, 9), torch.zeros(2, 8, 9))


class TestCeiling:
    def test_inactive_hinge_costs_nothing(self):
        rng = np.random.default_rng(10)
        field = torch.from_numpy(rng.uniform(-1, 1, size=(2, 6, 6)))
        assert float(ceiling_loss(field, 2.0)) == 0.0

    def test_single_three_four_vector(self):
        field = torch.zeros(2, 8, 8)
        field[0, 2, 2] = 3.0
        field[1, 2, 2] = 4.0
        assert float(ceiling_loss(field, 2.0)) == 3.0

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            field = rng.standard_normal((2, 5, 6)) * 3
            ceil = float(rng.uniform(0.0, 4.0))
            got = float(ceiling_loss(torch.from_numpy(field), ceil))
            assert abs(got - ceiling_oracle(field, ceil)) < 1e-9

    def test_zero_field_has_zero_loss_and_finite_gradient(self):
        field = torch.zeros(2, 6, 6, requires_grad=True)
        loss = ceiling_loss(field, 0.0)
        assert float(loss.detach()) == 0.0
        loss.backward()
        assert torch.isfinite(field.grad).all()
        assert torch.equal(field.grad, torch.zeros_like(field.grad))

    def test_per_sample_ceilings(self):
        field = torch.zeros(2, 2, 4, 4)
        field[0, 0, 1, 1] = 5.0
        field[1, 0, 1, 1] = 5.0
        out = ceiling_loss(field, torch.tensor([2.0, 6.0]))
        assert out.tolist() == [3.0, 0.0]

    def test_gradient_matches_finite_differences(self):
        field = torch.zeros(2, 4, 4, dtype=torch.float64)
        field[0, 1, 1] = 3.0
        field[1, 1, 1] = 4.0
        field[0, 2, 2] = 0.5
        field = field.requires_grad_(True)
        ceiling_loss(field, 1.0).backward()
        h = 1e-4
        for idx in [(0, 1, 1), (1, 1, 1)]:
            up = field.detach().clone()
            up[idx] += h
            down = field.detach().clone()
            down[idx] -= h
            fd = (float(ceiling_loss(up, 1.0)) - float(ceiling_loss(down, 1.0))) / (2 * h)
            assert abs(fd - float(field.grad[idx])) / abs(fd) < 1e-4

    def test_rejects_negative_ceiling(self):
        with pytest.raises(ValueError, match="non-negative"):
            ceiling_loss(torch.zeros(2, 4, 4), -1.0)

    def test_rejects_wrong_ceiling_shape(self):
        with pytest.raises(ValueError, match="scalar or"):
            ceiling_loss(torch.zeros(3, 2, 4, 4), torch.tensor([1.0, 2.0]))


class TestRampWeight:
    def test_endpoints(self):
        assert ramp_weight(0, 100) == 1.0
        assert ramp_weight(100, 100) == 10.0

    def test_midpoint(self):
        assert ramp_weight(50, 100) == 5.5

    def test_monotone_non_decreasing(self):
        values = [ramp_weight(i, 17) for i in range(18)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_clamps_past_the_end(self):
        assert ramp_weight(250, 100) == 10.0

    def test_custom_range(self):
        assert ramp_weight(1, 2, start=0.0, end=4.0) == 2.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="total_steps"):
            ramp_weight(0, 0)
        with pytest.raises(ValueError, match="step"):
            ramp_weight(-1, 10)


class TestCombineLosses:
    def test_hand_example_at_ramp_start(self):
        total, u = combine_losses(
            torch.tensor(2.0),
            torch.tensor(4.0),
            torch.tensor(1.0),
            torch.tensor(3.0),
            LossWeights(),
            step=0,
            total_steps=100,
        )
        assert u == 1.0
        assert float(total) == 10.0

    def test_ramp_end_scales_unsupervised_terms(self):
        total, u = combine_losses(
            torch.tensor(2.0),
            torch.tensor(4.0),
            torch.tensor(1.0),
            torch.tensor(3.0),
            LossWeights(),
            step=100,
            total_steps=100,
        )
        assert u == 10.0
        assert float(total) == 46.0

    def test_all_zero_terms_give_zero(self):
        total, _ = combine_losses(
            torch.tensor(0.0),
            torch.tensor(0.0),
            torch.tensor(0.0),
            torch.tensor(0.0),
            LossWeights(),
            step=3,
            total_steps=9,
        )
        assert float(total) == 0.0

    def test_weights_apply_to_their_terms(self):
        total, _ = combine_losses(
            torch.tensor(1.0),
            torch.tensor(1.0),
            torch.tensor(1.0),
            torch.tensor(1.0),
            LossWeights(smooth_weight=2.0, ceiling_weight=3.0),
            step=0,
            total_steps=10,
        )
        assert float(total) == 1.0 + 2.0 + 1.0 * (1.0 + 3.0)

    def test_gradient_flows_through_total(self):
        huber = torch.tensor(2.0, requires_grad=True)
        total, _ = combine_losses(
            huber,
            torch.tensor(0.0),
            torch.tensor(0.0),
            torch.tensor(0.0),
            LossWeights(),
            step=0,
            total_steps=1,
        )
        total.backward()
        assert float(huber.grad) == 1.0

    def test_defaults_match_documented_values(self):
        w = LossWeights()
        assert (w.huber_cutoff, w.smooth_weight, w.ceiling_weight) == (3.0, 1.0, 1.0)
        assert (w.ramp_start, w.ramp_end) == (1.0, 10.0)
