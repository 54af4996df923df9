import numpy as np
import pytest

from sideaware.box_geometry import SideId
from sideaware.errors import InvalidInputError
from sideaware.side_distribution import (SideDistribution, SideRange, distribution_features,
                                         distribution_from_logits, distribution_stats,
                                         expected_value, indoor_ranges, outdoor_ranges,
                                         shift_distribution, synthetic_distribution)


def delta(rng_, j):
    p = np.zeros(rng_.n_bins)
    p[j] = 1.0
    return SideDistribution(rng_, p)


class TestSideRange:
    def test_centers(self):
        r = SideRange(0.0, 2.0, 4)
        np.testing.assert_allclose(r.centers, [0.25, 0.75, 1.25, 1.75])
        assert np.all(np.diff(SideRange(-1.0, 3.0, 32).centers) > 0)

    @pytest.mark.parametrize("args", [(1.0, 1.0, 4), (2.0, 1.0, 4), (0.0, 1.0, 1), (0.0, 1.0, 2.5)])
    def test_invalid(self, args):
        with pytest.raises(InvalidInputError):
            SideRange(*args)

    def test_presets(self):
        indoor = indoor_ranges()
        assert indoor[SideId.TOP].s_max == 2.0 and indoor[SideId.FRONT].s_max == 3.5
        outdoor = outdoor_ranges()
        assert outdoor[SideId.FRONT].s_max == 0.4 and outdoor[SideId.LEFT].s_max == 0.3
        assert all(r.n_bins == 32 for r in indoor + outdoor)


class TestConstruction:
    def test_must_sum_to_one(self):
        with pytest.raises(InvalidInputError):
            SideDistribution(SideRange(0, 1, 4), [0.5, 0.5, 0.5, 0.0])
        with pytest.raises(InvalidInputError):
            SideDistribution(SideRange(0, 1, 4), [1.5, -0.5, 0.0, 0.0])
        with pytest.raises(InvalidInputError):
            SideDistribution(SideRange(0, 1, 4), [0.5, 0.5])

    def test_equal_logits_uniform(self):
        d = distribution_from_logits(np.full(32, 3.3), SideRange(0, 2, 32))
        np.testing.assert_allclose(d.probs, np.full(32, 1 / 32), atol=1e-15)

    def test_saturation(self):
        z = np.zeros(32)
        z[5] = 20.0
        d = distribution_from_logits(z, SideRange(0, 2, 32))
        assert d.probs.max() > 0.999
        assert np.argmax(d.probs) == 5

    def test_shift_invariance(self):
        z = np.random.default_rng(0).normal(size=32)
        r = SideRange(0, 2, 32)
        np.testing.assert_allclose(distribution_from_logits(z + 7, r).probs,
                                   distribution_from_logits(z, r).probs, atol=1e-12)

    def test_large_logits_stable(self):
        z = np.array([1000.0, 999.0, -1000.0, 0.0])
        d = distribution_from_logits(z, SideRange(0, 1, 4))
        assert np.all(np.isfinite(d.probs))
        assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        z = np.zeros(4)
        z[1] = bad
        with pytest.raises(InvalidInputError):
            distribution_from_logits(z, SideRange(0, 1, 4))

    def test_wrong_length(self):
        with pytest.raises(InvalidInputError):
            distribution_from_logits(np.zeros(5), SideRange(0, 1, 4))


class TestExpectedValue:
    def test_delta(self):
        r = SideRange(0.0, 3.5, 32)
        for j in (0, 7, 31):
            assert expected_value(delta(r, j)) == r.centers[j]

    def test_uniform_midpoint(self):
        r = SideRange(0.0, 2.0, 32)
        assert expected_value(SideDistribution(r, np.full(32, 1 / 32))) == pytest.approx(1.0, abs=1e-12)

    def test_four_bin_fixture(self):
        d = SideDistribution(SideRange(0.0, 2.0, 4), [0.25] * 4)
        assert expected_value(d) == pytest.approx(1.0, abs=1e-12)

    def test_direct_summation(self):
        rng = np.random.default_rng(1)
        r = SideRange(-0.5, 2.5, 32)
        for _ in range(100):
            p = rng.dirichlet(np.ones(32))
            d = SideDistribution(r, p)
            oracle = sum(p[i] * (-0.5 + (i + 0.5) * 3.0 / 32) for i in range(32))
            assert expected_value(d) == pytest.approx(oracle, abs=1e-12)
            assert r.s_min <= expected_value(d) <= r.s_max

    def test_linearity(self):
        rng = np.random.default_rng(2)
        r = SideRange(0, 2, 32)
        p, q = rng.dirichlet(np.ones(32)), rng.dirichlet(np.ones(32))
        for a in (0.0, 0.3, 1.0):
            mix = SideDistribution(r, a * p + (1 - a) * q)
            expected = a * expected_value(SideDistribution(r, p)) + (1 - a) * expected_value(SideDistribution(r, q))
            assert expected_value(mix) == pytest.approx(expected, abs=1e-12)


class TestStats:
    def test_delta(self):
        r = SideRange(0, 2, 32)
        mean, var, full = distribution_stats(delta(r, 3), k=4)
        assert mean == pytest.approx(0.25)
        assert var == pytest.approx(np.var([1, 0, 0, 0]))
        assert full == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("k", [1, 4, 32])
    def test_uniform(self, k):
        d = SideDistribution(SideRange(0, 2, 32), np.full(32, 1 / 32))
        mean, var, _ = distribution_stats(d, k)
        assert mean == pytest.approx(1 / 32, abs=1e-15)
        assert var == pytest.approx(0.0, abs=1e-15)

    def test_sort_oracle(self):
        rng = np.random.default_rng(4)
        r = SideRange(0, 3.5, 32)
        for _ in range(50):
            p = rng.dirichlet(np.full(32, 0.3))
            d = SideDistribution(r, p)
            k = int(rng.integers(1, 33))
            top = sorted(p.tolist(), reverse=True)[:k]
            m = sum(top) / k
            v = sum((t - m) ** 2 for t in top) / k
            c = r.centers
            e = float(np.sum(p * c))
            full = float(np.sum(p * (c - e) ** 2))
            np.testing.assert_allclose(distribution_stats(d, k), (m, v, full), atol=1e-12)

    def test_values_not_positions(self):
        r = SideRange(0, 1, 8)
        p = np.array([0.05, 0.4, 0.05, 0.05, 0.05, 0.3, 0.05, 0.05])
        a = distribution_stats(SideDistribution(r, p), 2)
        b = distribution_stats(SideDistribution(r, p[::-1]), 2)
        np.testing.assert_allclose(a[:2], b[:2], atol=1e-15)
        assert a[0] == pytest.approx(0.35)

    def test_full_variance_zero_only_for_delta(self):
        r = SideRange(0, 1, 8)
        p = np.zeros(8)
        p[2], p[3] = 1 - 1e-6, 1e-6
        assert distribution_stats(SideDistribution(r, p))[2] > 1e-12

    @pytest.mark.parametrize("k", [0, 33])
    def test_k_bounds(self, k):
        with pytest.raises(InvalidInputError):
            distribution_stats(SideDistribution(SideRange(0, 1, 32), np.full(32, 1 / 32)), k)

    def test_features(self):
        rng = np.random.default_rng(5)
        d = SideDistribution(SideRange(0, 1, 32), rng.dirichlet(np.ones(32)))
        f = distribution_features(d, 4)
        assert f.shape == (34,)
        np.testing.assert_array_equal(f[:32], d.probs)
        np.testing.assert_allclose(f[32:], distribution_stats(d, 4)[:2], atol=0)


class TestSynthetic:
    def test_sharp_hits_target(self):
        r = SideRange(0, 3.5, 32)
        d = synthetic_distribution(1.234, 1e6, 0.0, r)
        assert abs(expected_value(d) - 1.234) < r.bin_width

    def test_bias_shift(self):
        r = SideRange(0, 3.5, 32)
        # at high sharpness the mass sits on the bin nearest the target
        base = expected_value(synthetic_distribution(1.0, 1e6, 0.0, r))
        shifted = expected_value(synthetic_distribution(1.0, 1e6, 0.3, r))
        assert abs((shifted - base) - 0.3) < r.bin_width
        # a peak wider than a bin, away from the range ends, shifts smoothly
        soft = [expected_value(synthetic_distribution(1.5, 20.0, b, r)) for b in (0.0, 0.3)]
        assert soft[1] - soft[0] == pytest.approx(0.3, abs=1e-6)

    def test_zero_sharpness_uniform(self):
        r = SideRange(0, 2, 32)
        d = synthetic_distribution(0.4, 0.0, 0.0, r)
        np.testing.assert_allclose(d.probs, 1 / 32, atol=1e-15)
        assert expected_value(d) == pytest.approx(1.0)

    def test_noise_deterministic(self):
        r = SideRange(0, 2, 32)
        a = synthetic_distribution(1.0, 20.0, 0.0, r, np.random.default_rng(3), noise_std=0.5)
        b = synthetic_distribution(1.0, 20.0, 0.0, r, np.random.default_rng(3), noise_std=0.5)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_out_of_range(self):
        r = SideRange(0, 2, 32)
        with pytest.raises(InvalidInputError):
            synthetic_distribution(1.9, 10.0, 0.2, r)
        with pytest.raises(InvalidInputError):
            synthetic_distribution(1.0, -1.0, 0.0, r)


class TestShift:
    def test_interior_shift_moves_expectation(self):
        r = SideRange(0, 3.5, 32)
        d = synthetic_distribution(1.5, 50.0, 0.0, r)
        for delta_m in (-0.37, 0.05, 0.4):
            moved = shift_distribution(d, delta_m)
            assert expected_value(moved) == pytest.approx(expected_value(d) + delta_m, abs=1e-9)
            assert moved.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_pile_up_at_edge(self):
        r = SideRange(0, 1, 8)
        moved = shift_distribution(delta(r, 6), 5.0)
        assert moved.probs[-1] == pytest.approx(1.0)
