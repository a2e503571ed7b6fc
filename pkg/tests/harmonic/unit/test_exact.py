import numpy as np
import pytest

from rwre_toolkit.errors import LatticeMismatch, TableMiss
from rwre_toolkit.tools.harmonic import (
    PAYOFF_SURVIVAL,
    build_utable,
    compute_Un_exact,
    dp_estimate,
    harmonic_sweep,
    reachable_z_max,
    survival_gap_bound,
)
from rwre_toolkit.tools.walk import evolve, survival_probability_exact
from tests.test_helpers import brute_Un


@pytest.mark.unit
class TestComputeUnExact:
    """Test the finite-horizon harmonic function."""

    @pytest.mark.parametrize("n", [1, 2, 7, 50])
    def test_srw_from_zero(self, srw_env, n):
        """
        Test U_n(xi, 0) for the simple walk.
        Expected result: 0.5 for every n >= 1.
        Mock values: SRW, y = 0.
        Why: U_n(0) = -E(S_tau; tau <= n) and only a first down-step ends below 0.
        """
        assert compute_Un_exact(srw_env, 0.0, n) == pytest.approx(0.5, abs=1e-14)

    @pytest.mark.parametrize("n", [1, 5, 40])
    def test_srw_positive_start(self, srw_env, n):
        """
        Test U_n(xi, 3) for the simple walk.
        Expected result: 3.0 for every n.
        Mock values: SRW, y = 3.
        Why: Skip-free walks end exactly at 0, so no mass leaves below 0.
        """
        assert compute_Un_exact(srw_env, 3.0, n) == pytest.approx(3.0, abs=1e-13)

    def test_skewed_one_step(self, skewed_env):
        """
        Test one step of the skewed law from 0.
        Expected result: (2/3) * 1 = 2/3.
        Mock values: law {(-2, 1/3), (+1, 2/3)}, y = 0, n = 1.
        Why: One-step enumeration.
        """
        assert compute_Un_exact(skewed_env, 0.0, 1) == pytest.approx(2 / 3)

    def test_matches_enumeration(self, mixed_env):
        """
        Test U_n against enumeration.
        Expected result: agreement within 1e-12.
        Mock values: mixed environment, y = 2, n = 9.
        Why: Enumeration of 2^9 step sequences is an independent oracle.
        """
        assert compute_Un_exact(mixed_env, 2.0, 9) == pytest.approx(brute_Un(mixed_env, 2.0, 9), abs=1e-12)

    def test_off_lattice_start(self, srw_env):
        """
        Test a start offset off the lattice.
        Expected result: LatticeMismatch.
        Mock values: SRW, y = 0.5.
        Why: DP positions are integer multiples of the unit.
        """
        with pytest.raises(LatticeMismatch):
            compute_Un_exact(srw_env, 0.5, 3)

    def test_negative_horizon(self, srw_env):
        """
        Test a negative horizon.
        Expected result: ValueError.
        Mock values: n = -1.
        Why: Horizons count steps.
        """
        with pytest.raises(ValueError):
            compute_Un_exact(srw_env, 0.0, -1)


@pytest.mark.unit
class TestBackwardSweep:
    """Test the backward killed-kernel sweep against forward DP."""

    def test_position_payoff_matches_forward(self, mixed_env):
        """
        Test harmonic_sweep against compute_Un_exact on shifted environments.
        Expected result: row value at z equals U_{T-n}(theta^n xi, z) within 1e-12.
        Mock values: mixed environment, n = 3, T = 15, z = 0..6.
        Why: Both compute the same expectation, one backwards and one forwards.
        """
        row = harmonic_sweep(mixed_env, 3, 15, 6)
        shifted = mixed_env.shift(3)

        for z in range(7):
            assert row[z] == pytest.approx(compute_Un_exact(shifted, float(z), 12), abs=1e-12)

    def test_survival_payoff_matches_forward(self, markov_env):
        """
        Test the survival sweep.
        Expected result: row value at z equals P_{theta^n xi}(tau_z > T - n) within 1e-12.
        Mock values: Markov environment, n = 2, T = 22, z = 0..5.
        Why: Survival is the sweep with payoff 1.
        """
        row = harmonic_sweep(markov_env, 2, 22, 5, payoff=PAYOFF_SURVIVAL)
        shifted = markov_env.shift(2)

        for z in range(6):
            assert row[z] == pytest.approx(survival_probability_exact(shifted, float(z), 20), abs=1e-12)

    def test_unknown_payoff(self, srw_env):
        """
        Test an unsupported payoff.
        Expected result: ValueError.
        Mock values: payoff "variance".
        Why: Only position and survival payoffs are defined.
        """
        with pytest.raises(ValueError):
            harmonic_sweep(srw_env, 0, 5, 3, payoff="variance")


@pytest.mark.unit
class TestUTable:
    """Test UTable construction and lookups."""

    def test_srw_rows(self, srw_env):
        """
        Test the SRW table.
        Expected result: every row is (0.5, 1, 2, 3, ...).
        Mock values: SRW, N = 5, z_max = 10, horizon 50.
        Why: Skip-free closed form U(y) = y for y >= 1 and U(0) = 1/2.
        """
        table = build_utable(srw_env, 5, 10, horizon=50)
        expected = np.array([0.5] + list(range(1, 11)), dtype=float)

        assert table.entries.shape == (6, 11)
        for n in range(6):
            assert np.allclose(table.row(n), expected, atol=1e-12)
        assert table.terminal == 55

    def test_periodic_rows_alternate(self, periodic_env):
        """
        Test rows of a period-2 environment.
        Expected result: row n and row n + 2 agree within 1e-3.
        Mock values: periodic SRW/skewed environment, N = 6, z_max = 20, horizon 2000.
        Why: theta^2 xi = xi, and the rows only differ by two steps of horizon.
        """
        table = build_utable(periodic_env, 6, 20, horizon=2000)

        for n in range(5):
            assert np.allclose(table.row(n), table.row(n + 2), atol=1e-3)
        assert not np.allclose(table.row(0), table.row(1), atol=1e-3)

    def test_rows_nondecreasing(self, mixed_env):
        """
        Test monotonicity in y.
        Expected result: every row nondecreasing.
        Mock values: mixed environment, N = 10, z_max = 30, horizon 500.
        Why: U(xi, y) is nondecreasing in y.
        """
        table = build_utable(mixed_env, 10, 30, horizon=500)

        assert np.all(np.diff(table.entries, axis=1) >= -1e-12)

    def test_lookups(self, srw_env):
        """
        Test value lookups and misses.
        Expected result: interpolated value 2.5 at y = 2.5; TableMiss outside the range.
        Mock values: SRW table N = 3, z_max = 6.
        Why: Off-lattice lookups interpolate; out-of-range lookups fail loudly.
        """
        table = build_utable(srw_env, 3, 6, horizon=20)

        assert table.value(1, 2.5) == pytest.approx(2.5)
        with pytest.raises(TableMiss):
            table.value(4, 1.0)
        with pytest.raises(TableMiss):
            table.value(0, 7.0)

    def test_cell_cap(self, srw_env):
        """
        Test the table size guard.
        Expected result: ValueError before any work is done.
        Mock values: N = 10^4, z_max = 10^4 (10^8 cells over the 5e7 cap).
        Why: Full tables at that size do not fit in memory.
        """
        with pytest.raises(ValueError):
            build_utable(srw_env, 10_000, 10_000)

    def test_metadata(self, mixed_env):
        """
        Test provenance fields.
        Expected result: seed of the realization and a 16-digit model hash.
        Mock values: mixed environment realized with seed 42.
        Why: Tables record the environment they were computed for.
        """
        table = build_utable(mixed_env, 2, 5, horizon=10)

        assert table.seed == 42
        assert len(table.model_hash) == 16

    def test_reachable_z_max(self, srw_env, skewed_env):
        """
        Test the largest reachable index.
        Expected result: y + N for both laws (largest up-step 1).
        Mock values: y = 2, N = 5.
        Why: Table widths are sized from it.
        """
        assert reachable_z_max(srw_env, 2.0, 5) == 7
        assert reachable_z_max(skewed_env, 2.0, 5) == 7


@pytest.mark.unit
class TestDPEstimate:
    """Test the horizon-H approximation of U."""

    def test_srw_values(self, srw_env):
        """
        Test the DP estimate on the simple walk.
        Expected result: U(0) = 0.5 and U(4) = 4 with negligible truncation.
        Mock values: SRW, horizon 400.
        Why: U_n is constant in n for the simple walk.
        """
        zero = dp_estimate(srw_env, 0.0, 400)
        four = dp_estimate(srw_env, 4.0, 400)

        assert zero.value == pytest.approx(0.5, abs=1e-9)
        assert four.value == pytest.approx(4.0, abs=1e-9)
        assert zero.truncation < 1e-8
        assert zero.horizon == 400

    def test_truncation_bounds_growth(self, skewed_env):
        """
        Test the reported truncation.
        Expected result: truncation = |U_H - U_{H/2}| (no pruning at this horizon).
        Mock values: skewed law, y = 0, horizon 40.
        Why: The DP reports how much U_n still moved over the last half of the horizon.
        """
        estimate = dp_estimate(skewed_env, 0.0, 40)
        half = compute_Un_exact(skewed_env, 0.0, 20)

        assert estimate.truncation == pytest.approx(abs(estimate.value - half), abs=1e-12)
        assert estimate.gap_bound > 0.0

    def test_gap_bound(self, skewed_env):
        """
        Test the tail-mass diagnostic.
        Expected result: P(tau_y > H) * (y + H * max step) for the direct helper and the estimate.
        Mock values: skewed law (max step +1), y = 2, horizon 40.
        Why: The bound is attached to every DP estimate.
        """
        dist = evolve(skewed_env, 2.0, 40)
        expected = survival_probability_exact(skewed_env, 2.0, 40) * (2.0 + 40 * 1.0)

        assert survival_gap_bound(dist, 2.0, 1.0) == pytest.approx(expected, rel=1e-12)
        assert dp_estimate(skewed_env, 2.0, 40).gap_bound == pytest.approx(expected, rel=1e-12)
