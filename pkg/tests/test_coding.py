import math

import numpy as np
import pytest

from billiardlab.cocycle import CocycleProduct
from billiardlab.coding import (batched_log_singular_values, batched_log_singular_values_of, build_window_table,
                                exact_sequence_data, log_expansion_bound, sequence_data, sequence_matrices,
                                window_indices)
from billiardlab.errors import PreconditionError, WindowTooShort
from billiardlab.symbolic import Shift, sample_sequence


def table_error(ref, table, chain, seeds, lo=20, hi=30):
    """Max deviation of table data from the closed orbit of the whole sampled word."""
    r = table.radius
    worst = 0.0
    for s in seeds:
        seq = sample_sequence(chain, 60, s)
        tau, K, c = sequence_data(table, seq)
        T, Ke, Ce = exact_sequence_data(ref, seq)
        worst = max(worst, np.max(np.abs(tau[0, lo:hi] - T[r + lo:r + hi])),
                    np.max(np.abs(c[0, lo:hi] - Ce[r + lo:r + hi])), np.max(np.abs(K[0, lo:hi] - Ke[r + lo:r + hi])))
    return worst


class TestWindowTable:
    def test_sizes(self, table):
        s = Shift(3)
        assert len(table.curvature) == s.n_words(2 * table.radius + 1)
        assert len(table.tau) == s.n_words(2 * table.radius + 2)
        assert np.all(table.cos_phi > 0) and np.all(table.cos_phi <= 1 + 1e-12)
        assert np.allclose(table.curvature, 1.0)

    def test_against_exact_orbits(self, ref, table, chain):
        assert table_error(ref, table, chain, range(10)) <= 1e-5

    def test_error_decays_with_radius(self, ref, chain):
        errs = [table_error(ref, build_window_table(ref, r), chain, range(6)) for r in (2, 3, 4)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] / errs[0] < 0.25

    def test_period_two_windows(self, table):
        seq = np.array([0, 1] * 20)
        tau, K, c = sequence_data(table, seq)
        assert np.allclose(tau, 4.0, atol=1e-12) and np.allclose(c, 1.0, atol=1e-12)
        A = sequence_matrices(table, seq)
        assert np.allclose(A, -np.array([[5.0, 4.0], [6.0, 5.0]]), atol=1e-10)

    def test_bad_radius(self, ref):
        with pytest.raises(PreconditionError):
            build_window_table(ref, 0)

    def test_expansion_bound(self, table):
        assert 0 < log_expansion_bound(table) < 1


class TestWindowIndices:
    def test_matches_direct_encoding(self, chain):
        seq = sample_sequence(chain, 40, 1)
        idx = window_indices(seq, 5, 3)[0]
        direct = [Shift(3).index(seq[j:j + 5])[0] for j in range(36)]
        assert np.array_equal(idx, direct)

    def test_too_short(self):
        with pytest.raises(WindowTooShort):
            window_indices(np.array([0, 1, 2]), 5, 3)

    def test_repeat(self):
        with pytest.raises(PreconditionError):
            window_indices(np.array([0, 1, 1, 2, 0]), 3, 3)


class TestBatchedProducts:
    def test_matches_cocycle_product(self, sampler, rng):
        seqs = sampler.sequences(rng, 8, 300)
        tau, K, c = sequence_data(sampler.table, seqs)
        lv = batched_log_singular_values(tau, K, c)
        for b in range(8):
            ref_ls = CocycleProduct(2).extend(sequence_matrices(sampler.table, seqs[b])).log_singular_values()
            assert lv[b] == pytest.approx(ref_ls, rel=1e-11, abs=1e-9)

    def test_long_products_finite(self, sampler, rng):
        lv = sampler.log_svals(rng, 4, 20_000)
        assert np.all(np.isfinite(lv))
        assert np.allclose(lv[:, 0] / 20_000, 2.395, atol=0.05)

    @pytest.mark.parametrize("n", [1, 2, 7])
    def test_generic_matrices(self, rng, n):
        mats = rng.normal(size=(5, n, 2, 2))
        lv = batched_log_singular_values_of(mats)
        for b in range(5):
            M = np.eye(2)
            for A in mats[b]:
                M = A @ M
            assert lv[b] == pytest.approx(np.log(np.linalg.svd(M, compute_uv=False)), abs=1e-10)

    def test_rotations_and_diagonals(self):
        a = 0.4
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        lv = batched_log_singular_values_of(np.array([[R] * 50, [np.diag([0.5, 2.0])] * 50]))
        assert np.allclose(lv[0], 0, atol=1e-12)
        assert lv[1] == pytest.approx([50 * math.log(2), -50 * math.log(2)])
