import math

import mpmath
import numpy as np
import pytest
from scipy.stats import norm

from billiardlab import mptrace
from billiardlab.cocycle import map_derivative
from billiardlab.errors import InsufficientData, PreconditionError, WindowTooShort
from billiardlab.statistics import (MIN_EXCEEDANCES, MatrixSampler, PesinParameters, TailCurve, _mp_cycle,
                                    _mp_stable_line, calibrate_pesin_threshold, chunk_rng, exponent_exceedances,
                                    exponent_tail, exterior_tail, fit_exponential_rate, future_growth,
                                    hyperbolicity_estimates, invariant_directions, pesin_excursion_counts,
                                    pesin_tail, reference_exponents, regularity_estimate, regularity_profile,
                                    run_chunks, semicontinuity_probe, stable_growth_comparison, subadditivity_check,
                                    tempered_envelope, tempering_violation_rate)
from billiardlab.symbolic import sample_sequence

LAM = 2.3952  # leading exponent of the reference billiard, from a 1e5-collision run
LOG_P2 = math.log(5 + 2 * math.sqrt(6))
P2 = map_derivative(4.0, 1.0, 1.0, 1.0, 1.0)


def constant_sampler(A):
    A = np.asarray(A, dtype=float)
    return MatrixSampler(lambda rng, size, n: np.broadcast_to(A, (size, n) + A.shape).copy(), A.shape[0])


def gaussian_diag_sampler(rng, size, n):
    x = rng.normal(size=(size, n, 2))
    out = np.zeros((size, n, 2, 2))
    out[..., 0, 0] = np.exp(x[..., 0])
    out[..., 1, 1] = np.exp(x[..., 1])
    return out


class TestRateFit:
    def test_exact_exponential(self):
        n = np.arange(10, 101, 10)
        f = fit_exponential_rate(n, np.exp(-n.astype(float)))
        assert f.c == pytest.approx(1.0, abs=1e-12) and f.r2 == pytest.approx(1.0, abs=1e-12)

    def test_constant(self):
        n = np.arange(10, 101, 10)
        f = fit_exponential_rate(n, np.full(len(n), 0.5))
        assert f.c == pytest.approx(0.0, abs=1e-12) and f.logC == pytest.approx(math.log(0.5))

    def test_noisy(self, rng):
        n = np.arange(10, 101, 10)
        p = 3 * np.exp(-0.2 * n) * (1 + 0.05 * rng.standard_normal(len(n)))
        assert fit_exponential_rate(n, p).c == pytest.approx(0.2, abs=0.02)

    def test_censoring(self):
        n = np.arange(1, 7)
        counts = np.array([500, 200, 80, 30, 9, 0])
        f = fit_exponential_rate(n, counts / 1000, counts)
        assert f.points == 4 and f.n_max == 4
        with pytest.raises(InsufficientData):
            fit_exponential_rate(n[:5], counts[:5] / 1000, np.array([500, 9, 8, 7, 6]))

    def test_tail_curve(self):
        tc = TailCurve(0.1, 1, "upper", 100, np.array([1, 2, 3]), np.array([50, 5, 0])).refit()
        assert tc.fit is None and "4" in tc.fit_error
        assert list(tc.censored) == [False, True, True]
        assert tc.rows()[1] == (2, 100, 5, 0.05, True)
        assert tc.fit_json(7)["seed"] == 7


class TestChunks:
    def test_rng_streams_distinct(self):
        a = chunk_rng(1, 10, 0).random(4)
        assert not np.allclose(a, chunk_rng(1, 10, 1).random(4))
        assert not np.allclose(a, chunk_rng(1, 11, 0).random(4))
        assert np.array_equal(a, chunk_rng(1, 10, 0).random(4))

    def test_thread_determinism(self, sampler):
        args = (sampler, 1, LAM, [0.05 * LAM, 0.1 * LAM], [5, 10, 20], 3000, 99)
        a = exponent_exceedances(*args, threads=1, chunk=500)
        b = exponent_exceedances(*args, threads=8, chunk=500)
        assert np.array_equal(a, b)

    def test_sums_chunks(self):
        out = run_chunks(lambda rng, n, size: np.array([size, n]), [3, 4], 25, 0, chunk=10)
        assert [list(o) for o in out] == [[25, 9], [25, 12]]


class TestReference:
    def test_constant_cocycle(self):
        run = reference_exponents(constant_sampler(P2), n=2000)
        assert run.exponents == pytest.approx([LOG_P2, -LOG_P2], abs=1e-3)
        assert run.cauchy < 1e-3

    def test_billiard(self, sampler):
        run = reference_exponents(sampler, n=20_000, seed=3)
        assert run.exponents[0] == pytest.approx(LAM, abs=0.02)
        assert abs(run.exponents.sum()) < 1e-3
        assert run.mean_free_path == pytest.approx(4.1465, abs=0.02)


class TestExponentTails:
    def test_degenerate_period_two(self):
        up, lo = exponent_tail(constant_sampler(P2), 1, 0.01 * LOG_P2, [1, 5, 10, 50], 200, 0, LOG_P2)
        assert not up.exceedances.any() and not lo.exceedances.any()

    def test_epsilon_beyond_range(self, sampler):
        n = [10]
        lv = sampler.log_svals(chunk_rng(5, 10, 0), 2000, 10)[:, 0] / 10
        eps = LAM - lv.min() + 1e-9
        c = exponent_exceedances(sampler, 1, LAM, [eps], n, 2000, 5, chunk=2000)
        assert c[0, 0, 1] == 0

    def test_monotone_in_epsilon(self, sampler):
        eps = np.array([0.01, 0.02, 0.05, 0.1]) * LAM
        c = exponent_exceedances(sampler, 1, LAM, eps, [5, 10, 20], 4000, 1)
        assert np.all(np.diff(c, axis=1) <= 0)

    def test_decay_at_small_epsilon(self, sampler):
        # small n carries an O(1/n) bias of the finite-time exponent, so the grid starts at 8
        up, lo = exponent_tail(sampler, 1, 0.02 * LAM, [8, 11, 14, 17, 20, 26], 20_000, 2, LAM, threads=4)
        for t in (up, lo):
            assert t.exceedances[-1] < t.exceedances[0] / 4
            assert t.fit is not None and t.fit.c > 0 and t.fit.r2 >= 0.8

    def test_exterior_rotation(self):
        a = 0.3
        R = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
        t = exterior_tail(constant_sampler(R), 1, 0.01, [5, 10], 100, 0, 0.0)
        assert not t.exceedances.any()

    def test_exterior_top_is_both_tails(self, sampler):
        n = [5, 10]
        t = exterior_tail(sampler, 1, 0.05 * LAM, n, 3000, 8, LAM)
        c = exponent_exceedances(sampler, 1, LAM, [0.05 * LAM], n, 3000, 8)
        assert np.array_equal(t.exceedances, c[:, 0, :].sum(axis=1))

    def test_exterior_determinant_matches_gaussian(self):
        """Top exterior power of diag(e^X, e^Y): a Gaussian Birkhoff sum with variance 2n."""
        n = [4, 8, 16, 32, 64]
        samples, eps = 40_000, 0.5
        t = exterior_tail(MatrixSampler(gaussian_diag_sampler), 2, eps, n, samples, 4, 0.0)
        for k, cnt in zip(n, t.exceedances):
            p = 2 * norm.sf(eps * math.sqrt(k) / math.sqrt(2))
            assert abs(cnt / samples - p) <= 5 * math.sqrt(p * (1 - p) / samples)
        assert t.fit.c == pytest.approx(eps ** 2 / 4, rel=0.35)

    def test_bad_arguments(self, sampler):
        with pytest.raises(PreconditionError):
            exponent_exceedances(sampler, 3, LAM, [0.1], [5], 10, 0)
        with pytest.raises(PreconditionError):
            exponent_exceedances(sampler, 1, LAM, [0.0], [5], 10, 0)


class TestRegularity:
    def test_diagonal_is_regular(self):
        lam = 0.8
        mats = np.broadcast_to(np.diag([math.exp(lam), math.exp(-lam)]), (401, 2, 2))
        for N in (10, 50, 100):
            est = regularity_estimate(mats, lam, PesinParameters(0.01, 2.0, 0.2, N))
            assert est.value == pytest.approx(1.0, abs=1e-12)

    def test_period_two_bounded(self):
        mats = np.broadcast_to(P2, (601, 2, 2))
        vals = [regularity_estimate(mats, LOG_P2, PesinParameters(0.01, 2.0, 0.2, N)).value for N in (10, 50, 100)]
        assert vals == pytest.approx([1.0] * 3, abs=1e-9)

    def test_invariant_directions(self):
        mats = np.broadcast_to(P2, (2, 80, 2, 2))
        eu, es, au, as_ = invariant_directions(mats, 20)
        assert np.allclose(np.abs(eu @ np.array([2, math.sqrt(6)]) / math.sqrt(10)), 1, atol=1e-12)
        assert np.allclose(np.abs(es @ np.array([-2, math.sqrt(6)]) / math.sqrt(10)), 1, atol=1e-12)

    def test_monotone_in_window_and_epsilon(self, sampler, rng):
        mats = sampler.matrices(rng, 1, 461)[0]
        lam = LAM
        by_N = [regularity_estimate(mats, lam, PesinParameters(0.02 * lam, 2, 0.2, N)).value for N in (5, 20, 50, 100)]
        assert np.all(np.diff(by_N) >= 0)
        by_eps = [regularity_estimate(mats, lam, PesinParameters(e * lam, 2, 0.2, 50)).value
                  for e in (0.1, 0.05, 0.02, 0.01, 0.005)]
        assert np.all(np.diff(by_eps) >= 0)

    def test_estimate_argmax(self, sampler, rng):
        mats = sampler.matrices(rng, 1, 141)[0]
        est = regularity_estimate(mats, LAM, PesinParameters(0.005 * LAM, 2, 0.2, 50))
        assert est.value > 1 and abs(est.argmax_n) <= 50
        assert est.tempered >= est.value
        assert math.log(est.value) == pytest.approx(est.defects.max())

    def test_window_too_short(self):
        with pytest.raises(WindowTooShort):
            regularity_estimate(np.broadcast_to(P2, (100, 2, 2)), LOG_P2, PesinParameters(0.1, 2, 0.2, 50))

    def test_tempering(self, sampler, rng):
        mats = sampler.matrices(rng, 10, 1000)
        N = 100
        raw, tempered, _ = regularity_profile(mats, LAM, 0.1 * LAM, N)
        assert tempering_violation_rate(raw[:, N:-N], 0.1 * LAM) <= 0.05
        raw, tempered, _ = regularity_profile(mats, LAM, 0.02 * LAM, N)
        assert tempering_violation_rate(tempered, 0.02 * LAM) == 0.0
        assert np.all(tempered >= raw)

    def test_envelope_is_smallest(self, rng):
        x = rng.normal(size=50)
        env = tempered_envelope(x, 0.3)
        brute = np.array([max(x[j] - abs(j - m) * 0.3 for j in range(50)) for m in range(50)])
        assert np.allclose(env, brute)

    def test_parameters(self):
        for bad in ((0.0, 2, 0.2, 10), (0.1, 2, 0.0, 10), (0.1, 2, 0.2, 0)):
            with pytest.raises(PreconditionError):
                PesinParameters(*bad)


class TestPesin:
    def test_everything_in_P(self, sampler, rng):
        cnt = pesin_excursion_counts(sampler, rng, 50, 40, LAM, PesinParameters(0.02 * LAM, math.inf, 0.2, 20))
        assert not cnt.any()

    def test_monotone_in_threshold(self, sampler):
        counts = [pesin_excursion_counts(sampler, chunk_rng(3, 0, 0), 200, 60, LAM,
                                         PesinParameters(0.02 * LAM, cp, 0.2, 20)) for cp in (1.05, 1.3, 2.0)]
        assert np.all(counts[0] >= counts[1]) and np.all(counts[1] >= counts[2])

    def test_monotone_in_delta(self, sampler):
        curves = [pesin_tail(sampler, PesinParameters(0.02 * LAM, 1.3, d, 20), [20, 40], 500, 4, LAM).exceedances
                  for d in (0.1, 0.3, 0.6, 1.0)]
        assert np.all(np.diff(np.array(curves), axis=0) <= 0)

    def test_calibration(self, sampler):
        c50 = calibrate_pesin_threshold(sampler, LAM, 0.02 * LAM, 50, 2000, 0, quantile=0.5)
        c90 = calibrate_pesin_threshold(sampler, LAM, 0.02 * LAM, 50, 2000, 0, quantile=0.9)
        assert 1.0 <= c50 <= c90
        assert calibrate_pesin_threshold(sampler, LAM, 0.1 * LAM, 50, 500, 0) == pytest.approx(1.0, abs=1e-9)

    def test_decay_at_small_epsilon(self, sampler):
        t = pesin_tail(sampler, PesinParameters(0.02 * LAM, 1.298, 0.5, 50), [20, 40, 60, 80, 120], 3000, 0, LAM,
                       threads=4)
        assert np.all(np.diff(t.exceedances) <= 0) and t.exceedances[0] > 0
        assert t.fit is not None and t.fit.c > 0


class TestSubadditivity:
    def test_diagonal_equality(self):
        mats = np.broadcast_to(np.diag([3.0, 0.5]), (120, 2, 2))
        assert subadditivity_check(mats, np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_full_space(self, sampler, rng):
        mats = sampler.matrices(rng, 1, 100)[0]
        assert subadditivity_check(mats, np.eye(2), 30, 30) <= 1e-12

    def test_sampled_lines(self, sampler, rng):
        for b in range(3):
            mats = sampler.matrices(rng, 1, 100)[0]
            assert subadditivity_check(mats, rng.normal(size=2)) <= 1e-9

    def test_higher_dimension(self, rng):
        mats = rng.normal(size=(60, 3, 3))
        assert subadditivity_check(mats, np.linalg.qr(rng.normal(size=(3, 2)))[0], 20, 20) <= 1e-9

    def test_too_short(self):
        with pytest.raises(WindowTooShort):
            subadditivity_check(np.broadcast_to(P2, (10, 2, 2)), np.array([1.0, 0.0]))


class TestSemicontinuity:
    def test_same_point(self, ref, chain):
        seq = sample_sequence(chain, 40, 0)
        with mpmath.workdps(40):
            obs = [mptrace.MPObstacle.of(o) for o in ref.obstacles]
            cyc = _mp_cycle(ref, obs, seq)
            a, b = _mp_stable_line(cyc, 20, 39), _mp_stable_line(cyc, 20, 39)
            assert a[0] * b[1] - a[1] * b[0] == 0

    def test_constant_cocycle(self):
        # the leading direction of a constant cocycle does not depend on the base point
        _, es1, _, _ = invariant_directions(np.broadcast_to(P2, (1, 60, 2, 2)), 10)
        _, es2, _, _ = invariant_directions(np.broadcast_to(P2, (1, 90, 2, 2)), 10)
        assert abs(es1[0, 5, 0] * es2[0, 5, 1] - es1[0, 5, 1] * es2[0, 5, 0]) < 1e-14

    def test_small_probe(self, ref, chain):
        probe = semicontinuity_probe(ref, chain, depths=range(2, 9), targets=2, samples=2, seed=1, margin=20, dps=40)
        assert np.all(np.diff(np.log(probe.median_g)) < 0)
        assert probe.slope < 0 and probe.r2 > 0.9
        h = hyperbolicity_estimates(probe)
        assert 0 < h.rho < 1 and h.alpha > 0

    def test_bad_depths(self, ref, chain):
        with pytest.raises(PreconditionError):
            semicontinuity_probe(ref, chain, depths=[3, 2])


class TestStableGrowth:
    def test_identical_words(self, sampler):
        seq = sample_sequence(sampler.chain, 100, 0)
        assert future_growth(sampler.table, seq, 30, 40) - future_growth(sampler.table, seq.copy(), 30, 40) == 0

    def test_horizon(self, sampler):
        with pytest.raises(WindowTooShort):
            future_growth(sampler.table, sample_sequence(sampler.chain, 50, 0), 30, 40)

    def test_longer_future_is_closer(self, sampler):
        d20 = np.median(stable_growth_comparison(sampler, 20, 100, 0))
        d40 = np.median(stable_growth_comparison(sampler, 40, 100, 0))
        assert d40 <= d20

    def test_reference_size(self, sampler):
        assert np.median(stable_growth_comparison(sampler, 40, 100, 0)) <= 0.05 * LAM
