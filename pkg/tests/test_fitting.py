"""Exhaustive fit tests.

The oracle here re-enumerates the candidate space with itertools.product
and scores every candidate against the target in one flat pass, written
independently of the library's meshgrid/divmod/chunked search.  Indices
and distances must match the library bitwise.
"""

import itertools

import numpy as np
import pytest

from gaborpress.errors import DimensionError, InvalidParameterError
from gaborpress.fitting import (
    PER_KERNEL_MAX_ABS,
    UNIT,
    FitGrid,
    default_grid,
    distance_grid,
    fit_kernel,
    fit_layer,
    params_grid,
)
from gaborpress.gabor import synth_bank, synth_kernel


def oracle_bank(grid):
    """Amplitude-free kernels and full amplitude column, oracle-enumerated.

    Candidate order: amplitudes outermost, then centers, thetas, psis,
    sigmas, lambdas, gammas innermost, straight from itertools.product.
    """
    rows = [
        (lm, th, ps, sg, gm, 1.0, x0, y0)
        for (x0, y0), th, ps, sg, lm, gm in itertools.product(
            grid.centers, grid.thetas, grid.psis,
            grid.sigmas, grid.lambdas, grid.gammas,
        )
    ]
    bases = synth_bank(np.array(rows), grid.k).reshape(len(rows), grid.k * grid.k)
    amps = np.repeat(np.array(grid.amplitudes), len(rows))
    return bases, amps


def oracle_fit(target, grid, bases, amps):
    """First-minimum scan over every candidate; returns (index, distance)."""
    t = np.asarray(target, dtype=np.float64).ravel()
    scale = float(np.max(np.abs(t))) if grid.amplitude_scale_mode == PER_KERNEL_MAX_ABS else 1.0
    full = np.tile(bases, (len(grid.amplitudes), 1))
    diff = t[None, :] - (amps * scale)[:, None] * full
    d2 = np.sum(diff * diff, axis=-1)
    i = int(np.argmin(d2))  # first occurrence wins ties, lowest index
    return i, float(np.sqrt(d2[i]))


class TestGridShape:
    def test_candidate_counts(self):
        assert default_grid(7).count == 490000
        assert default_grid(5).count == 250000
        assert default_grid(3).count == 90000
        assert default_grid(1).count == 10000

    def test_base_count_divides_out_amplitudes(self):
        g = default_grid(3)
        assert g.base_count * len(g.amplitudes) == g.count

    def test_base_bank_is_cached(self):
        g = default_grid(3)
        assert g.base_bank() is g.base_bank()

    def test_candidate_params_round_trip(self, rng):
        # Decoding an index then synthesizing must reproduce the bank row.
        g = default_grid(3)
        bank = g.base_bank()
        for i in map(int, rng.integers(0, g.count, size=200)):
            p = g.candidate_params(i)
            ia, ib = divmod(i, g.base_count)
            want = g.amplitudes[ia] * bank[ib].reshape(3, 3)
            assert np.array_equal(synth_kernel(p, 3), want)

    def test_candidate_params_rejects_out_of_range(self):
        g = default_grid(1)
        with pytest.raises(InvalidParameterError):
            g.candidate_params(g.count)
        with pytest.raises(InvalidParameterError):
            g.candidate_params(-1)

    def test_grid_validation(self):
        kw = dict(amplitudes=(1.0,), centers=((1.0, 1.0),), thetas=(0.0,),
                  psis=(0.0,), sigmas=(1.0,), lambdas=(1.0,), gammas=(1.0,), k=3)
        FitGrid(**kw)  # valid baseline
        with pytest.raises(InvalidParameterError):
            FitGrid(**{**kw, "thetas": ()})
        with pytest.raises(InvalidParameterError):
            FitGrid(**{**kw, "sigmas": (0.0,)})
        with pytest.raises(InvalidParameterError):
            FitGrid(**{**kw, "lambdas": (-1.0,)})
        with pytest.raises(InvalidParameterError):
            FitGrid(**{**kw, "amplitude_scale_mode": "bogus"})
        with pytest.raises(DimensionError):
            FitGrid(**{**kw, "k": 0})
        with pytest.raises(DimensionError):
            default_grid(2.5)


class TestFitKernel:
    @pytest.mark.parametrize("k", [3, 5])
    @pytest.mark.parametrize("mode", [UNIT, PER_KERNEL_MAX_ABS])
    def test_matches_oracle(self, rng, k, mode):
        g = default_grid(k, amplitude_scale_mode=mode)
        bases, amps = oracle_bank(g)
        for _ in range(8):
            t = rng.standard_normal((k, k))
            got = fit_kernel(t, g)
            want_i, want_d = oracle_fit(t, g, bases, amps)
            assert got.candidate_index == want_i
            assert got.l2_distance == want_d

    def test_exact_recovery_of_grid_members(self, rng):
        # A kernel synthesized from a grid candidate must fit at distance 0.
        g = default_grid(5)
        for i in map(int, rng.integers(0, g.count, size=50)):
            p = g.candidate_params(i)
            res = fit_kernel(synth_kernel(p, 5), g)
            assert res.l2_distance == 0.0
            assert res.candidate_index <= i  # ties break toward lower index
            assert np.array_equal(synth_kernel(res.params, 5), synth_kernel(p, 5))

    def test_zero_target_picks_first_zero_amplitude(self):
        g = default_grid(3)
        res = fit_kernel(np.zeros((3, 3)), g)
        assert res.l2_distance == 0.0
        assert res.candidate_index == 2 * g.base_count  # a=0 block start
        assert res.params.a == 0.0

    def test_zero_target_max_abs_degenerates_to_index_zero(self):
        # Max-abs scale of a zero kernel zeroes every amplitude; all
        # candidates tie at distance 0 and the first index wins.
        g = default_grid(3, amplitude_scale_mode=PER_KERNEL_MAX_ABS)
        res = fit_kernel(np.zeros((3, 3)), g)
        assert res.candidate_index == 0
        assert res.l2_distance == 0.0
        assert res.params.a == 0.0

    def test_fit_is_idempotent(self, rng):
        g = default_grid(3)
        first = fit_kernel(rng.standard_normal((3, 3)), g)
        again = fit_kernel(synth_kernel(first.params, 3), g)
        assert again.l2_distance == 0.0
        assert np.array_equal(
            synth_kernel(again.params, 3), synth_kernel(first.params, 3)
        )

    def test_reported_distance_matches_recomputation(self, rng):
        g = default_grid(5)
        for _ in range(10):
            t = rng.standard_normal((5, 5))
            res = fit_kernel(t, g)
            redo = float(np.linalg.norm(t - synth_kernel(res.params, 5)))
            assert res.l2_distance == pytest.approx(redo, abs=1e-12)

    def test_winner_beats_sampled_rivals_k7(self, rng):
        # Full oracle at k=7 is heavy; spot-check 5000 rival candidates.
        g = default_grid(7)
        t = rng.standard_normal((7, 7))
        res = fit_kernel(t, g)
        for i in map(int, rng.integers(0, g.count, size=5000)):
            rival = float(np.linalg.norm(t - synth_kernel(g.candidate_params(i), 7)))
            assert res.l2_distance <= rival + 1e-12
            if rival < res.l2_distance + 1e-12 and i < res.candidate_index:
                pytest.fail(f"candidate {i} ties the winner from below")

    def test_max_abs_fit_is_scale_equivariant(self, rng):
        # Doubling the target doubles the scale and the distance exactly
        # (powers of two are exact in binary floats); the index is stable.
        g = default_grid(3, amplitude_scale_mode=PER_KERNEL_MAX_ABS)
        t = rng.standard_normal((3, 3))
        a = fit_kernel(t, g)
        b = fit_kernel(2.0 * t, g)
        assert a.candidate_index == b.candidate_index
        assert b.l2_distance == 2.0 * a.l2_distance
        assert b.params.a == 2.0 * a.params.a

    def test_rejects_bad_targets(self):
        g = default_grid(3)
        with pytest.raises(DimensionError):
            fit_kernel(np.zeros((5, 5)), g)
        with pytest.raises(DimensionError):
            fit_kernel(np.zeros((3,)), g)
        bad = np.zeros((3, 3))
        bad[1, 1] = np.nan
        with pytest.raises(InvalidParameterError):
            fit_kernel(bad, g)


class TestFitLayer:
    def test_shapes_and_accessors(self, rng):
        g = default_grid(3)
        w = rng.standard_normal((2, 3, 3, 3))
        res = fit_layer(w, g)
        assert len(res) == 2 and all(len(row) == 3 for row in res)
        assert params_grid(res).shape == (2, 3, 8)
        assert distance_grid(res).shape == (2, 3)

    def test_parallel_matches_serial(self, rng):
        g = default_grid(3)
        w = rng.standard_normal((2, 2, 3, 3))
        serial = fit_layer(w, g, workers=1)
        parallel = fit_layer(w, g, workers=4)
        for row_s, row_p in zip(serial, parallel):
            for s, p in zip(row_s, row_p):
                assert s.candidate_index == p.candidate_index
                assert s.l2_distance == p.l2_distance

    def test_layer_entries_match_single_kernel_fits(self, rng):
        g = default_grid(3)
        w = rng.standard_normal((2, 2, 3, 3))
        res = fit_layer(w, g)
        for o in range(2):
            for i in range(2):
                solo = fit_kernel(w[o, i], g)
                assert res[o][i].candidate_index == solo.candidate_index
                assert res[o][i].l2_distance == solo.l2_distance

    def test_rejects_bad_weight_shapes(self, rng):
        g = default_grid(3)
        with pytest.raises(DimensionError):
            fit_layer(rng.standard_normal((2, 3, 3)), g)
        with pytest.raises(DimensionError):
            fit_layer(rng.standard_normal((2, 2, 3, 5)), g)
