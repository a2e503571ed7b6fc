import math

import numpy as np
import pytest
from pydantic import ValidationError

from rwre_toolkit.errors import HorizonTooShort
from rwre_toolkit.models import Path
from rwre_toolkit.tools.environment import realize
from rwre_toolkit.tools.walk import (
    first_passage,
    first_passage_batch,
    rescale,
    sample_path,
    sample_paths,
    survival_probability_exact,
)
from services.rng import RandomStream
from tests.test_helpers import TENTHS_DOWN, TENTHS_UP, THIRDS, make_model


@pytest.fixture
def stream():
    return RandomStream.named(2024, "walk-tests")


@pytest.mark.unit
class TestSamplePath:
    """Test unconditioned path sampling."""

    def test_tau_is_first_passage(self, mixed_env, stream):
        """
        Test the recorded first passage time.
        Expected result: tau is the first n with y + S_n <= 0, or None when the path stays positive.
        Mock values: mixed environment, y = 1, horizon 40, 200 paths.
        Why: The kill boundary is closed at 0.
        """
        for index in range(200):
            path = sample_path(mixed_env, 1.0, 40, stream, index)
            positions = path.positions()
            hits = np.flatnonzero(positions[1:] <= 0.0)
            expected = int(hits[0]) + 1 if hits.size else None
            assert path.tau == expected
            assert path.horizon == 40

    def test_same_index_same_path(self, mixed_env, stream):
        """
        Test reproducibility of a single path.
        Expected result: equal steps for the same (stream, index), different for another index.
        Mock values: stream index 7 twice, then index 8.
        Why: Samples are pure functions of their stream coordinates.
        """
        first = sample_path(mixed_env, 0.0, 30, stream, 7)
        again = sample_path(mixed_env, 0.0, 30, stream, 7)
        other = sample_path(mixed_env, 0.0, 30, stream, 8)

        assert first.steps == again.steps
        assert first.steps != other.steps

    def test_empirical_survival(self, srw_env, stream):
        """
        Test the survival frequency of sampled SRW paths.
        Expected result: P(tau_0 > 4) = 0.1875 within 4 standard errors over 10^5 paths.
        Mock values: SRW, y = 0, horizon 4.
        Why: Enumeration of the 16 sign sequences gives 3/16.
        """
        ensemble = sample_paths(srw_env, 0.0, 4, 100_000, stream)
        survived = np.all(ensemble.positions[:, 1:] > 0.0, axis=1).mean()

        se = math.sqrt(0.1875 * 0.8125 / 100_000)
        assert abs(survived - 0.1875) <= 4 * se
        assert ensemble.positions.shape == (100_000, 5)

    def test_invalid_arguments(self, srw_env, stream):
        """
        Test argument validation.
        Expected result: ValueError for horizon 0 and for y < 0.
        Mock values: horizon 0, y = -1.
        Why: Paths have at least one step and start in [0, inf).
        """
        with pytest.raises(ValueError):
            sample_path(srw_env, 0.0, 0, stream)
        with pytest.raises(ValueError):
            sample_path(srw_env, -1.0, 5, stream)


@pytest.mark.unit
class TestFirstPassage:
    """Test first passage below zero."""

    def test_skip_free_terminal(self, srw_env, stream):
        """
        Test the terminal value of a skip-free walk.
        Expected result: y + S_tau = 0 and tau >= y for every uncensored sample.
        Mock values: SRW, y = 3, n_max 10^4, 500 samples.
        Why: Unit steps cannot jump over 0.
        """
        tau, terminal = first_passage_batch(srw_env, 3.0, 10_000, 500, stream)
        done = tau > 0

        assert done.any()
        assert np.all(terminal[done] == 0.0)
        assert np.all(tau[done] >= 3)

    def test_skewed_overshoot(self, skewed_env, stream):
        """
        Test the terminal values of the skewed law from 0.
        Expected result: terminal in {0, -1, -2} for every uncensored sample.
        Mock values: law {(-2, 1/3), (+1, 2/3)}, y = 0, 2000 samples.
        Why: A down-step of 2 from position 0, 1 or 2 lands at -2, -1 or 0.
        """
        tau, terminal = first_passage_batch(skewed_env, 0.0, 10_000, 2000, stream)

        assert set(np.unique(terminal[tau > 0])) <= {0.0, -1.0, -2.0}

    def test_censoring_recorded(self, srw_env, stream):
        """
        Test a horizon too short to reach 0.
        Expected result: censored sample carrying the surviving value.
        Mock values: SRW, y = 5, n_max 3.
        Why: Censoring is recorded, never dropped.
        """
        sample = first_passage(srw_env, 5.0, 3, stream)

        assert sample.censored
        assert sample.tau is None
        assert sample.terminal > 0.0

    def test_uncensored_sample(self, srw_env, stream):
        """
        Test a sample that reaches 0.
        Expected result: tau set and terminal <= 0.
        Mock values: SRW, y = 0, n_max 10^6.
        Why: From 0 the SRW returns to (-inf, 0] almost surely.
        """
        sample = first_passage(srw_env, 0.0, 1_000_000, stream)

        assert not sample.censored
        assert sample.terminal <= 0.0


@pytest.mark.unit
class TestNonDyadicLattice:
    """Test the kill boundary on lattices whose unit is not a float."""

    @staticmethod
    def lattice_env(law):
        return realize(make_model("iid-alphabet", [law]), 1)

    def test_exact_zero_is_killed(self, stream):
        """
        Test walks that reach 0 after three down-steps of 1/3 from 1.
        Expected result: killed fraction 1/8 within 4 SE, always at tau = 3 with terminal 0.
        Mock values: law {+-1/3}, y = 1, n_max 3, 4000 samples.
        Why: 1 - 1/3 - 1/3 - 1/3 is 5.6e-17 in floating point, not 0.
        """
        env = self.lattice_env(THIRDS)

        tau, terminal = first_passage_batch(env, 1.0, 3, 4000, stream)
        killed = tau > 0

        assert abs(killed.mean() - 0.125) <= 4 * math.sqrt(0.125 * 0.875 / 4000)
        assert np.all(tau[killed] == 3)
        assert np.all(terminal[killed] == 0.0)
        assert np.all(terminal[~killed] > 0.0)

    def test_sample_path_tau(self, stream):
        """
        Test tau of single sampled paths on the thirds lattice.
        Expected result: tau = 3 exactly when all three steps are down, otherwise None.
        Mock values: law {+-1/3}, y = 1, horizon 3, 300 paths.
        Why: Single paths use the same boundary as batches.
        """
        env = self.lattice_env(THIRDS)

        for index in range(300):
            path = sample_path(env, 1.0, 3, stream, index)
            assert path.tau == (3 if all(s < 0 for s in path.steps) else None)

    @pytest.mark.parametrize("law,y", [(THIRDS, 1.0), (TENTHS_DOWN, 0.7), (TENTHS_UP, 3.3)])
    def test_survival_matches_dp(self, stream, law, y):
        """
        Test Monte Carlo survival against the lattice DP.
        Expected result: P(tau_y > 200) within 4 SE of the exact value.
        Mock values: laws {+-1/3}, {(-0.3, 1/4), (0.1, 3/4)}, {(-0.1, 3/4), (0.3, 1/4)}; 10^5 samples.
        Why: Walks that touch 0 on a non-dyadic lattice must die in both.
        """
        env = self.lattice_env(law)
        exact = survival_probability_exact(env, y, 200)

        tau, _ = first_passage_batch(env, y, 200, 100_000, stream)
        se = math.sqrt(exact * (1.0 - exact) / 100_000)

        assert abs((tau == 0).mean() - exact) <= 4 * se

    def test_free_paths_on_lattice(self, stream):
        """
        Test positions of free paths.
        Expected result: every position is k / 10 for an integer k, to the last bit.
        Mock values: law {(-0.3, 1/4), (0.1, 3/4)}, y = 0.7, horizon 50, 500 paths.
        Why: Ensembles are built from integer lattice sums.
        """
        env = self.lattice_env(TENTHS_DOWN)

        positions = sample_paths(env, 0.7, 50, 500, stream).positions
        k = np.rint(positions / 0.1)

        assert np.all(positions == k * 0.1)


@pytest.mark.unit
class TestRescale:
    """Test the rescaling map onto [0, 1]."""

    def test_grid_values(self):
        """
        Test the grid values of a short path.
        Expected result: (0, 0.5, 1.0, 0.5, 1.0).
        Mock values: N = 4, sigma = 1, steps (+1, +1, -1, +1), y = 0.
        Why: Direct arithmetic (y + S_k) / (sqrt(N) sigma).
        """
        scaled = rescale(Path(y=0.0, steps=(1.0, 1.0, -1.0, 1.0)), 4, 1.0)

        assert scaled.values == pytest.approx((0.0, 0.5, 1.0, 0.5, 1.0))

    def test_interpolation(self):
        """
        Test the value between grid times.
        Expected result: 0.75 at t = 3/8.
        Mock values: the path above.
        Why: Linear interpolation between 0.5 at t = 1/4 and 1.0 at t = 1/2.
        """
        scaled = rescale(Path(y=0.0, steps=(1.0, 1.0, -1.0, 1.0)), 4, 1.0)

        assert scaled.at(3 / 8) == pytest.approx(0.75)

    def test_constant_path(self):
        """
        Test zero increments.
        Expected result: identically y / (sqrt(N) sigma).
        Mock values: y = 2, three zero steps, N = 3, sigma = 1.
        Why: Only the start offset contributes.
        """
        scaled = rescale(Path(y=2.0, steps=(0.0, 0.0, 0.0)), 3, 1.0)

        assert scaled.values == pytest.approx((2 / math.sqrt(3),) * 4)

    def test_horizon_too_short(self):
        """
        Test rescaling beyond the path.
        Expected result: HorizonTooShort.
        Mock values: two-step path, N = 3.
        Why: The rescaled path needs N steps.
        """
        with pytest.raises(HorizonTooShort):
            rescale(Path(y=0.0, steps=(1.0, 1.0)), 3, 1.0)

    def test_time_outside_unit_interval(self):
        """
        Test evaluation outside [0, 1].
        Expected result: ValueError.
        Mock values: t = 1.5.
        Why: The rescaled path lives on [0, 1].
        """
        scaled = rescale(Path(y=0.0, steps=(1.0,)), 1, 1.0)

        with pytest.raises(ValueError):
            scaled.at(1.5)


@pytest.mark.unit
def test_path_rejects_wrong_tau():
    """
    Test Path validation of the first passage time.
    Expected result: ValidationError.
    Mock values: y = 1, steps (+1, -2), tau = 1.
    Why: tau must be the first index with y + S_n <= 0 (here 2).
    """
    with pytest.raises(ValidationError):
        Path(y=1.0, steps=(1.0, -2.0), tau=1)
