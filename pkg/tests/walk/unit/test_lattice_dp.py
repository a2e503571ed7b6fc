import math

import numpy as np
import pytest

from rwre_toolkit.errors import LatticeMismatch
from rwre_toolkit.models import StepLaw
from rwre_toolkit.tools.environment import realize
from rwre_toolkit.tools.walk import (
    evolve,
    free_distribution,
    initial_distribution,
    lattice_dp_step,
    survival_curve,
    survival_probability_exact,
)
from tests.test_helpers import SKEWED, SRW, brute_alive_law, brute_survival, make_model, max_abs_difference


@pytest.mark.unit
class TestLatticeDPStep:
    """Test one step of the killed-walk DP."""

    def test_simple_walk_from_one(self):
        """
        Test one SRW step from y = 1.
        Expected result: alive {2: 0.5}, killed {0: 0.5}.
        Mock values: point mass at 1, unit 1.
        Why: One-step enumeration; landing on 0 kills.
        """
        dist = lattice_dp_step(initial_distribution(1.0, 1.0), StepLaw(**SRW))

        assert dist.alive_map() == {2.0: 0.5}
        assert dist.killed_map() == {0.0: 0.5}
        assert dist.time == 1

    def test_skewed_law_from_two(self):
        """
        Test one skewed step from y = 2.
        Expected result: alive {3: 2/3}, killed {0: 1/3}.
        Mock values: point mass at 2, law {(-2, 1/3), (+1, 2/3)}.
        Why: One-step enumeration with a jump of size 2.
        """
        dist = lattice_dp_step(initial_distribution(2.0, 1.0), StepLaw(**SKEWED))

        assert dist.alive_map() == pytest.approx({3.0: 2 / 3})
        assert dist.killed_map() == pytest.approx({0.0: 1 / 3})

    def test_start_at_zero(self):
        """
        Test the first step from y = 0.
        Expected result: alive {1: 0.5}, killed {-1: 0.5}.
        Mock values: point mass at 0, SRW law.
        Why: From 0 only the up-step survives.
        """
        dist = lattice_dp_step(initial_distribution(0.0, 1.0), StepLaw(**SRW))

        assert dist.alive_map() == {1.0: 0.5}
        assert dist.killed_map() == {-1.0: 0.5}

    def test_off_lattice_law(self):
        """
        Test a law that does not live on the distribution's lattice.
        Expected result: LatticeMismatch.
        Mock values: unit 1, law {(-0.5, 0.5), (+0.5, 0.5)}.
        Why: Mixing lattices would silently misplace mass.
        """
        law = StepLaw(values=[-0.5, 0.5], probs=[0.5, 0.5])

        with pytest.raises(LatticeMismatch):
            lattice_dp_step(initial_distribution(1.0, 1.0), law)

    def test_negative_start(self):
        """
        Test a negative starting offset.
        Expected result: ValueError.
        Mock values: y = -1.
        Why: The walk starts in [0, inf).
        """
        with pytest.raises(ValueError):
            initial_distribution(-1.0, 1.0)


@pytest.mark.unit
class TestSurvival:
    """Test exact survival probabilities."""

    def test_srw_four_steps(self, srw_env):
        """
        Test P(tau_0 > 4) for the simple walk.
        Expected result: 3/16 = 0.1875.
        Mock values: SRW, y = 0, n = 4.
        Why: Three of the sixteen sign sequences stay positive.
        """
        assert survival_probability_exact(srw_env, 0.0, 4) == pytest.approx(0.1875, abs=1e-15)

    def test_srw_hundred_steps(self, srw_env):
        """
        Test P(tau_0 > 100) for the simple walk.
        Expected result: (1/2) C(100, 50) 2^-100 = 0.0397945 within 1e-6.
        Mock values: SRW, y = 0, n = 100.
        Why: Closed form from the ballot theorem.
        """
        exact = 0.5 * math.comb(100, 50) / 2 ** 100

        assert survival_probability_exact(srw_env, 0.0, 100) == pytest.approx(exact, abs=1e-12)
        assert survival_probability_exact(srw_env, 0.0, 100) == pytest.approx(0.0397945, abs=1e-6)

    def test_zero_steps(self, mixed_env):
        """
        Test survival over zero steps.
        Expected result: 1.
        Mock values: mixed environment, y = 0, n = 0.
        Why: No step has been taken.
        """
        assert survival_probability_exact(mixed_env, 0.0, 0) == 1.0

    def test_matches_enumeration(self, mixed_env):
        """
        Test the DP against brute-force enumeration.
        Expected result: same alive law and survival within 1e-12.
        Mock values: mixed environment, y = 1, n = 8.
        Why: Enumeration over 2^8 step sequences is an independent oracle.
        """
        dist = evolve(mixed_env, 1.0, 8)

        assert max_abs_difference(dist.alive_map(), brute_alive_law(mixed_env, 1.0, 8)) < 1e-12
        assert dist.alive_mass == pytest.approx(brute_survival(mixed_env, 1.0, 8), abs=1e-12)

    def test_mass_conservation(self, markov_env):
        """
        Test alive + killed + pruned mass.
        Expected result: 1 within 1e-12 after 200 steps.
        Mock values: Markov environment, y = 3.
        Why: The DP only moves mass between alive and killed states.
        """
        dist = evolve(markov_env, 3.0, 200)

        assert dist.total_mass + dist.pruned_mass == pytest.approx(1.0, abs=1e-12)

    def test_survival_nonincreasing(self, mixed_env):
        """
        Test monotonicity of the survival curve.
        Expected result: P(tau_y > n) nonincreasing in n.
        Mock values: mixed environment, y = 2, n = 1..60.
        Why: {tau_y > n + 1} is contained in {tau_y > n}.
        """
        curve = survival_curve(mixed_env, 2.0, range(1, 61))
        values = [curve[n] for n in range(1, 61)]

        assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))

    def test_skip_free_kills_at_zero(self, srw_env):
        """
        Test where a skip-free walk is absorbed.
        Expected result: every killed state is 0.
        Mock values: SRW, y = 3, n = 50.
        Why: Unit down-steps cannot overshoot 0.
        """
        dist = evolve(srw_env, 3.0, 50)

        assert set(dist.killed_map()) == {0.0}

    def test_non_lattice_model(self):
        """
        Test DP on a model without a lattice.
        Expected result: LatticeMismatch.
        Mock values: law {(-1.5e-7, 0.5), (+1.5e-7, 0.5)}.
        Why: Exact DP needs a lattice; sampling still works.
        """
        env = realize(make_model("iid-alphabet", [{"values": [-1.5e-7, 1.5e-7], "probs": [0.5, 0.5]}]), 1)

        with pytest.raises(LatticeMismatch):
            survival_probability_exact(env, 0.0, 3)


@pytest.mark.unit
class TestFreeDistribution:
    """Test the law of y + S_n without killing."""

    def test_two_srw_steps(self, srw_env):
        """
        Test the free law after two SRW steps.
        Expected result: offset -2 with masses (1/4, 0, 1/2, 0, 1/4).
        Mock values: SRW, y = 0, n = 2.
        Why: Binomial law of S_2.
        """
        offset, mass = free_distribution(srw_env, 0.0, 2)

        assert offset == -2
        assert np.allclose(mass, [0.25, 0.0, 0.5, 0.0, 0.25])

    def test_free_dominates_killed(self, mixed_env):
        """
        Test that killing only removes mass.
        Expected result: killed alive mass <= free mass at every positive position.
        Mock values: mixed environment, y = 1, n = 12.
        Why: The killed law is a restriction of the free law.
        """
        offset, mass = free_distribution(mixed_env, 1.0, 12)
        alive = evolve(mixed_env, 1.0, 12).alive

        for z in range(1, alive.size):
            assert alive[z] <= mass[z - offset] + 1e-15
