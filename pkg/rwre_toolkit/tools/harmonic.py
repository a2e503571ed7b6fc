"""
The quenched harmonic function U(xi, y).

U is approximated two ways: exactly at a finite horizon, U_n(xi, y) =
E_xi(y + S_n; tau_y > n), by lattice DP; and by Monte Carlo through the
stopping identity U(xi, y) = -E_xi(S_{tau_y}). The checks below verify the
harmonic recursion, the martingale identity, monotonicity and the slope.
"""

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from config import get_config
from rwre_toolkit.errors import AllCensored, InsufficientPrecision
from rwre_toolkit.models import (
    ConvergenceProfile,
    HarmonicEstimate,
    HarmonicMethod,
    LatticeDistribution,
    LimitCheck,
    MartingaleReport,
    ProfilePoint,
    SlopeReport,
    UTable,
)
from rwre_toolkit.tools.environment import Environment, kill_level, step_table, to_lattice_index
from rwre_toolkit.tools.walk import evolve, first_passage_batch, require_lattice
from services.rng import RandomStream
from services.serialization import model_hash

logger = logging.getLogger(__name__)

# Terminal payoffs of the backward sweep
PAYOFF_POSITION = "position"
PAYOFF_SURVIVAL = "survival"

HarmonicProvider = Callable[[Environment, float], HarmonicEstimate]


# ----- Backward sweep -----

def _terminal_values(payoff: str, unit: float, start: int, stop: int) -> np.ndarray:
    if payoff == PAYOFF_POSITION:
        return np.arange(start, stop, dtype=float) * unit
    if payoff == PAYOFF_SURVIVAL:
        return np.ones(stop - start)
    raise ValueError(f"unknown payoff: {payoff}")


def backward_rows(env: Environment, start: int, terminal: int, z_max: int,
                  record: Optional[Iterable[int]] = None,
                  payoff: str = PAYOFF_POSITION) -> Dict[int, np.ndarray]:
    """
    Run the killed kernel backwards from `terminal` down to shift `start`.

    Row m holds V_m(z) = E_{theta^m xi, z}(f(z + S_{T-m}); tau_z > T - m) for
    lattice indices z = 0..z_max, where f is the position (U) or 1 (survival).

    Args:
        record: shifts to keep; defaults to `start` only

    Returns:
        Dict mapping each recorded shift to its row
    """
    unit = require_lattice(env)
    if not 0 <= start <= terminal:
        raise ValueError("need 0 <= start <= terminal")
    wanted = {start} if record is None else {int(m) for m in record}
    if any(m < start or m > terminal for m in wanted):
        raise ValueError("recorded shifts must lie in [start, terminal]")

    table = step_table(env.model)
    up, down = table.max_up, table.max_down
    span = terminal - start
    # Above span * down the walk cannot be killed, so V equals its exact value
    size = max(z_max, span * down) + 1
    exact = _terminal_values(payoff, unit, 0, size + up)
    values = exact[:size].copy()
    rows: Dict[int, np.ndarray] = {}
    if terminal in wanted:
        rows[terminal] = values[:z_max + 1].copy()
    if span == 0:
        return rows

    letters = env.letters(start + 1, span)
    for m in range(terminal - 1, start - 1, -1):
        remaining = terminal - m
        cut = min(size, max(z_max, remaining * down) + 1)
        extended = np.concatenate((values, exact[size:]))
        new = np.zeros(size)
        steps, probs = table.lattice_atoms(letters[m - start])
        for k, p in zip(steps, probs):
            k = int(k)
            lo = max(0, 1 - k)
            if lo < cut:
                new[lo:cut] += p * extended[lo + k:cut + k]
        new[cut:] = exact[cut:size]
        values = new
        if m in wanted:
            rows[m] = values[:z_max + 1].copy()
    return rows


def harmonic_sweep(env: Environment, n: int, terminal: int, z_max: int,
                   payoff: str = PAYOFF_POSITION) -> np.ndarray:
    """
    U_{T-n}(theta^n xi, z * h) for z = 0..z_max in one backward pass.

    With payoff="survival" the row is P_{theta^n xi}(tau_z > T - n) instead.
    """
    return backward_rows(env, n, terminal, z_max, payoff=payoff)[n]


# ----- Exact finite horizon -----

def compute_Un_exact(env: Environment, y: float, n: int) -> float:
    """
    U_n(xi, y) = E_xi(y + S_n; tau_y > n) from the lattice DP.

    Raises:
        LatticeMismatch: If the model has no lattice or y is off-lattice
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    return evolve(env, y, n).first_moment()


def survival_gap_bound(dist: LatticeDistribution, y: float, max_step: float) -> float:
    """Diagnostic bound U - U_n <= P(tau_y > n) * (y + n * max_step)."""
    return dist.alive_mass * (y + dist.time * max_step)


def dp_estimate(env: Environment, y: float, horizon: Optional[int] = None) -> HarmonicEstimate:
    """
    U(xi, y) approximated by U_H(xi, y).

    truncation is |U_H - U_{H/2}| plus the first moment the pruned DP mass
    could have carried; gap_bound is the tail-mass diagnostic.
    """
    horizon = horizon or get_config().simulation.dp_horizon
    half = max(1, horizon // 2)
    marks: Dict[int, float] = {}

    def observe(m, dist):
        if m == half:
            marks[m] = dist.first_moment()

    dist = evolve(env, y, horizon, observe)
    value = dist.first_moment()
    max_step = float(step_table(env.model).values.max())
    pruned_moment = dist.pruned_mass * (y + horizon * max_step)
    return HarmonicEstimate(
        y=y,
        value=value,
        method=HarmonicMethod.dp,
        horizon=horizon,
        truncation=abs(value - marks.get(half, value)) + pruned_moment,
        gap_bound=survival_gap_bound(dist, y, max_step),
    )


def dp_provider(horizon: Optional[int] = None) -> HarmonicProvider:
    """U provider backed by the finite-horizon DP."""
    def provide(env: Environment, y: float) -> HarmonicEstimate:
        return dp_estimate(env, y, horizon)
    return provide


# ----- Monte Carlo -----

def estimate_U_stopping(env: Environment, y: float, n_samples: int, n_max: int,
                        stream: RandomStream) -> HarmonicEstimate:
    """
    Mean of -S_{tau_y} over uncensored first-passage samples.

    Censored samples are excluded and counted; the estimate is flagged when
    their share exceeds the configured fraction.

    Raises:
        AllCensored: If no sample reached (-inf, 0] before n_max
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    tau, terminal = first_passage_batch(env, y, n_max, n_samples, stream)
    uncensored = tau > 0
    censored = int(n_samples - uncensored.sum())
    if not uncensored.any():
        raise AllCensored(f"all {n_samples} samples from y={y} survived {n_max} steps")
    overshoot = y - terminal[uncensored]
    count = overshoot.size
    value = float(overshoot.mean())
    std_error = float(overshoot.std(ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    flagged = censored / n_samples > get_config().simulation.censor_flag_fraction
    if flagged:
        logger.warning(f"U estimate at y={y} censored {censored}/{n_samples} samples at n_max={n_max}")
    logger.debug(f"MC U({y}) = {value:.6g} +/- {std_error:.2g} from {count} samples")
    return HarmonicEstimate(
        y=y,
        value=max(value, 0.0),
        std_error=std_error,
        n_samples=n_samples,
        censored=censored,
        method=HarmonicMethod.mc,
        flagged=flagged,
    )


def mc_provider(n_samples: int, n_max: int, stream: RandomStream) -> HarmonicProvider:
    """U provider backed by the stopping estimator; each query uses its own substream."""
    def provide(env: Environment, y: float) -> HarmonicEstimate:
        sub = stream.substream(f"offset={env.offset}/y={y!r}")
        return estimate_U_stopping(env, y, n_samples, n_max, sub)
    return provide


# ----- Checks -----

def _check_increasing(values: Sequence[int], name: str):
    if list(values) != sorted(set(values)):
        raise ValueError(f"{name} must be strictly increasing")


def convergence_profile(env: Environment, y: float, n_list: Sequence[int]) -> ConvergenceProfile:
    """U_n(xi, y) along n_list from a single DP pass; monotone records the submartingale check."""
    _check_increasing(n_list, "n_list")
    wanted = set(n_list)
    points: List[ProfilePoint] = []

    def observe(m, dist):
        if m in wanted:
            points.append(ProfilePoint(n=m, value=dist.first_moment()))

    evolve(env, y, max(n_list) if n_list else 0, observe)
    values = [p.value for p in points]
    monotone = all(b >= a - 1e-12 * max(1.0, abs(a)) for a, b in zip(values, values[1:]))
    if not monotone:
        logger.warning(f"U_n profile at y={y} is not monotone: {values}")
    return ConvergenceProfile(y=y, points=points, monotone=monotone)


def harmonic_recursion_check(env: Environment, y: float, n: int) -> float:
    """
    |U_{n+1}(xi, y) - sum_{x' > 0} U_n(theta xi, x') P_xi(y + X_1 = x')|.

    Both sides come from independent forward DP runs.
    """
    lhs = compute_Un_exact(env, y, n + 1)
    shifted = env.shift(1)
    rhs = 0.0
    for value, prob in env.law(1).atoms():
        destination = y + value
        if destination > kill_level(env.model):
            rhs += prob * compute_Un_exact(shifted, destination, n)
    return abs(lhs - rhs)


def harmonic_limit_check(env: Environment, y: float, provider: HarmonicProvider) -> LimitCheck:
    """
    Residual of U(xi, y) = sum_{x' > 0} U(theta xi, x') P_xi(y + X_1 = x')
    with propagated standard error.

    Passes when |residual| <= k * SE + truncation, with k the configured SE
    multiplier.

    Raises:
        InsufficientPrecision: If the propagated SE exceeds the configured floor
    """
    settings = get_config()
    here = provider(env, y)
    shifted = env.shift(1)
    residual = here.value
    variance = here.std_error ** 2
    truncation = here.truncation
    for value, prob in env.law(1).atoms():
        destination = y + value
        if destination <= kill_level(env.model):
            continue
        there = provider(shifted, destination)
        residual -= prob * there.value
        variance += (prob * there.std_error) ** 2
        truncation += prob * there.truncation
    std_error = math.sqrt(variance)
    if std_error > settings.simulation.precision_floor:
        raise InsufficientPrecision(
            f"propagated SE {std_error:.3g} exceeds floor {settings.simulation.precision_floor:.3g}"
        )
    passed = abs(residual) <= settings.statistics.se_multiplier * std_error + truncation + 1e-10
    return LimitCheck(y=y, residual=residual, std_error=std_error, truncation=truncation, passed=passed)


def martingale_check(env: Environment, y: float, N: int, n_list: Sequence[int]) -> MartingaleReport:
    """
    M_n = sum_{x' > 0} U_{N-n}(theta^n xi, x') P_xi(y + S_n = x', tau_y > n)
    must equal U_N(xi, y) for every n in n_list.
    """
    if any(n < 0 or n > N for n in n_list):
        raise ValueError("n_list must lie in [0, N]")
    unit = require_lattice(env)
    table = step_table(env.model)
    z_max = to_lattice_index(y, unit) + N * max(table.max_up, 0)
    rows = backward_rows(env, 0, N, z_max, record=n_list)
    alive: Dict[int, np.ndarray] = {}
    wanted = set(n_list)

    def observe(m, dist):
        if m in wanted:
            alive[m] = dist.alive.copy()

    final = evolve(env, y, N, observe)
    target = final.first_moment()
    values = {}
    for n in n_list:
        mass = alive[n]
        values[n] = float(np.dot(mass, rows[n][:mass.size]))
    deviation = max((abs(v - target) for v in values.values()), default=0.0)
    return MartingaleReport(y=y, N=N, target=target, values=values,
                            max_deviation=deviation, passed=deviation < 1e-9)


def slope_profile(env: Environment, y_list: Sequence[float], horizon: Optional[int] = None) -> SlopeReport:
    """
    Ratios U(xi, y) / y with U from the horizon-H DP, all y from one backward sweep.

    Every U_H(xi, y) >= y must hold; the ratio at the largest y must lie in
    the configured band around 1.
    """
    if not y_list or any(y <= 0 for y in y_list):
        raise ValueError("y_list must be nonempty and positive")
    if list(y_list) != sorted(y_list):
        raise ValueError("y_list must be increasing")
    settings = get_config()
    horizon = horizon or settings.simulation.dp_horizon
    unit = require_lattice(env)
    indices = [to_lattice_index(y, unit) for y in y_list]
    row = harmonic_sweep(env, 0, horizon, max(indices))
    points = [(float(y), float(row[z]), float(row[z] / y)) for y, z in zip(y_list, indices)]
    lower = all(u >= y * (1.0 - 1e-12) for y, u, _ in points)
    final_ratio = points[-1][2]
    band = settings.statistics.ratio_band
    return SlopeReport(
        points=points,
        lower_bound_holds=lower,
        final_ratio=final_ratio,
        band=band,
        passed=lower and abs(final_ratio - 1.0) <= band,
    )


# ----- Tables -----

def reachable_z_max(env: Environment, y: float, N: int) -> int:
    """Largest lattice index y + S_n can reach within N steps."""
    unit = require_lattice(env)
    return to_lattice_index(y, unit) + N * max(step_table(env.model).max_up, 0)


def build_utable(env: Environment, N: int, z_max: int, horizon: Optional[int] = None) -> UTable:
    """
    Rows U_{T-n}(theta^n xi, z * h) for n = 0..N, z = 0..z_max, with the
    common terminal T = N + horizon.

    Raises:
        LatticeMismatch: If the model has no lattice
        ValueError: If the table exceeds the configured cell cap
    """
    settings = get_config().simulation
    horizon = horizon or settings.dp_horizon
    unit = require_lattice(env)
    cells = (N + 1) * (z_max + 1)
    if cells > settings.max_table_cells:
        raise ValueError(f"UTable of {cells} cells exceeds the cap of {settings.max_table_cells}")
    rows = backward_rows(env, 0, N + horizon, z_max, record=range(N + 1))
    entries = np.vstack([rows[n] for n in range(N + 1)])
    table = UTable(N=N, horizon=horizon, unit=unit, entries=entries,
                   model_hash=model_hash(env.model), seed=env.seed)
    logger.info(f"Built UTable N={N} horizon={horizon} z_max={z_max} (model {table.model_hash}, seed {env.seed})")
    return table
