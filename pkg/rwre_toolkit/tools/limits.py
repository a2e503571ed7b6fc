"""
Statistical checks of the limit theorems and exact checks of the finite-n
inequalities.

Target laws:
    Rayleigh:          F(u) = 1 - exp(-u^2 / 2), u >= 0.
    Bessel-3 at time t started from x > 0: Brownian motion killed at 0 and
    reweighted by z / x, so the density is (z / x) * (phi_t(z - x) - phi_t(z + x))
    with phi_t the N(0, t) density (reflection principle). Integrating gives
        F(c) = Phi((c - x) / sqrt t) + Phi((c + x) / sqrt t) - 1
               - (t / x) * (phi_t(c - x) - phi_t(c + x)).
    From x = 0 the law is that of |B_t| for a 3-dimensional Brownian motion,
    i.e. sqrt(t) times a chi law with 3 degrees of freedom.
"""

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from config import get_config
from rwre_toolkit.errors import EmptySample, SparseCells
from rwre_toolkit.models import (
    AsymptoticRatioReport,
    FKGReport,
    GoFReport,
    GoFTest,
    LatticeLaw,
    LemmaBoundReport,
    LemmaBoundRow,
    OracleReport,
    RatioRow,
    SlopeShiftReport,
    UTable,
)
from rwre_toolkit.tools.conditioned import (
    conditioned_ensemble,
    conditioned_marginal,
    meander_ensemble_dp,
    meander_marginal,
)
from rwre_toolkit.tools.environment import Environment, step_table, to_lattice_index
from rwre_toolkit.tools.harmonic import backward_rows, harmonic_sweep, reachable_z_max
from rwre_toolkit.tools.walk import evolve, free_distribution, require_lattice
from services.rng import RandomStream, plan_chunks
from services.service_manager import service_manager
from services.serialization import model_hash

logger = logging.getLogger(__name__)

ORACLE_GRID_STEPS = 16
ORACLE_ALPHA = 1e-3


# ----- Target laws -----

def rayleigh_cdf(u):
    u = np.clip(np.asarray(u, dtype=float), 0.0, None)
    return -np.expm1(-0.5 * u * u)


def rayleigh_pdf(u):
    u = np.asarray(u, dtype=float)
    return np.where(u > 0.0, u * np.exp(-0.5 * u * u), 0.0)


def bessel3_pdf(z, x: float = 0.0, t: float = 1.0):
    """Time-t density of the 3-dimensional Bessel process started at x."""
    z = np.asarray(z, dtype=float)
    if x == 0.0:
        return np.where(z > 0.0, stats.chi.pdf(z, 3, scale=math.sqrt(t)), 0.0)
    scale = math.sqrt(t)
    density = (z / x) * (stats.norm.pdf(z - x, scale=scale) - stats.norm.pdf(z + x, scale=scale))
    return np.where(z > 0.0, density, 0.0)


def bessel3_cdf(c, x: float = 0.0, t: float = 1.0):
    """Time-t CDF of the 3-dimensional Bessel process started at x."""
    c = np.clip(np.asarray(c, dtype=float), 0.0, None)
    scale = math.sqrt(t)
    if x == 0.0:
        return stats.chi.cdf(c, 3, scale=scale)
    cdf = (stats.norm.cdf((c - x) / scale) + stats.norm.cdf((c + x) / scale) - 1.0
           - (t / x) * (stats.norm.pdf(c - x, scale=scale) - stats.norm.pdf(c + x, scale=scale)))
    return np.clip(cdf, 0.0, 1.0)


def bessel3_target(x: float, t: float) -> str:
    return f"bessel3-marginal({x!r},{t!r})"


# ----- Goodness of fit -----

def ks_test(samples: Sequence[float], target_cdf: Callable, target: str = "custom",
            seed: Optional[int] = None, model: Optional[str] = None) -> GoFReport:
    """
    One-sample Kolmogorov-Smirnov test with the asymptotic p-value.

    Raises:
        EmptySample: If there are no samples
    """
    data = np.sort(np.asarray(samples, dtype=float))
    if data.size == 0:
        raise EmptySample("KS test needs at least one sample")
    result = stats.kstest(data, target_cdf, method="asymp")
    return GoFReport(
        test=GoFTest.ks,
        statistic=float(result.statistic),
        p_value=float(min(max(result.pvalue, 0.0), 1.0)),
        n_samples=int(data.size),
        target=target,
        seed=seed,
        model_hash=model,
    )


def chi_square_test(observed: Sequence[float], expected: Sequence[float], target: str = "custom",
                    seed: Optional[int] = None, model: Optional[str] = None) -> GoFReport:
    """
    Pearson chi-square with cells - 1 degrees of freedom; expected counts are
    rescaled to the observed total.

    Raises:
        EmptySample: If there are no observations
        SparseCells: If an expected count is below 5
    """
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if observed.shape != expected.shape:
        raise ValueError("observed and expected must have the same cells")
    total = observed.sum()
    if total <= 0:
        raise EmptySample("chi-square test needs observations")
    expected = expected * (total / expected.sum())
    if np.any(expected < 5.0):
        raise SparseCells(f"smallest expected count is {expected.min():.3g} (< 5)")
    if observed.size < 2:
        statistic, p_value = 0.0, 1.0
    else:
        result = stats.chisquare(observed, expected)
        statistic, p_value = float(result.statistic), float(result.pvalue)
    return GoFReport(
        test=GoFTest.chi_square,
        statistic=max(statistic, 0.0),
        p_value=float(min(max(p_value, 0.0), 1.0)),
        n_samples=int(total),
        target=target,
        seed=seed,
        model_hash=model,
    )


def two_sample_chi_square(first: Sequence[float], second: Sequence[float], target: str = "custom") -> GoFReport:
    """
    Homogeneity test of two samples over their common values; values with
    fewer than 5 expected counts are pooled into the neighbouring cell.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    if first.size == 0 or second.size == 0:
        raise EmptySample("two-sample chi-square needs two nonempty samples")
    values = np.unique(np.concatenate((first, second)))
    a = np.array([np.count_nonzero(first == v) for v in values], dtype=float)
    b = np.array([np.count_nonzero(second == v) for v in values], dtype=float)
    share = first.size / (first.size + second.size)
    cells_a, cells_b, acc_a, acc_b = [], [], 0.0, 0.0
    for ca, cb in zip(a, b):
        acc_a += ca
        acc_b += cb
        pooled = acc_a + acc_b
        if min(pooled * share, pooled * (1.0 - share)) >= 5.0:
            cells_a.append(acc_a)
            cells_b.append(acc_b)
            acc_a = acc_b = 0.0
    if acc_a + acc_b > 0.0:
        if not cells_a:
            raise SparseCells("too few samples for a two-sample chi-square test")
        cells_a[-1] += acc_a
        cells_b[-1] += acc_b
    if len(cells_a) < 2:
        statistic, p_value = 0.0, 1.0
    else:
        result = stats.chi2_contingency(np.array([cells_a, cells_b]), correction=False)
        statistic, p_value = float(result[0]), float(result[1])
    return GoFReport(
        test=GoFTest.chi_square,
        statistic=max(statistic, 0.0),
        p_value=float(min(max(p_value, 0.0), 1.0)),
        n_samples=int(first.size + second.size),
        target=target,
    )


def jitter_lattice(indices: np.ndarray, span: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Spread lattice samples uniformly across their support cell before rescaling."""
    return (indices + span * (rng.random(indices.size) - 0.5)) * scale


# ----- Endpoint samplers -----

def _fits_path_table(N: int, z_max: int) -> bool:
    return (N + 1) * (z_max + 1) <= get_config().simulation.max_table_cells


def _sample_law(law: LatticeLaw, n_samples: int, stream: RandomStream) -> np.ndarray:
    tasks = [(law, stream, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    return np.concatenate(service_manager.map_chunks(_sample_law_chunk, tasks))


def _sample_law_chunk(law: LatticeLaw, stream: RandomStream, chunk_index: int, count: int) -> np.ndarray:
    return law.sample(stream.generator(chunk_index), count)


# ----- Limit theorems -----

def rayleigh_clt_test(env: Environment, N: int, n_samples: int, stream: RandomStream) -> GoFReport:
    """
    KS test of S_N / (sqrt(N) sigma) under the meander against the Rayleigh law.

    Endpoints come from the exact DP path sampler when its survival table fits
    the cell cap and from the exact endpoint law otherwise.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    unit = require_lattice(env)
    law = meander_marginal(env, N, N)
    z_max = N * max(step_table(env.model).max_up, 0)
    if _fits_path_table(N, z_max):
        ensemble = meander_ensemble_dp(env, N, n_samples, stream.substream("paths"))
        indices = np.rint(ensemble.endpoints() / unit)
    else:
        indices = _sample_law(law, n_samples, stream.substream("endpoints")).astype(float)
    scale = unit / (math.sqrt(N) * env.model.sigma)
    values = jitter_lattice(indices, law.span, scale, stream.substream("jitter").generator(0))
    report = ks_test(values, rayleigh_cdf, target="rayleigh", seed=env.seed, model=model_hash(env.model))
    logger.info(f"Rayleigh KS N={N}: D={report.statistic:.4g} p={report.p_value:.4g}")
    return report


def bessel_marginal_test(env: Environment, x: float, N: int, n_samples: int, stream: RandomStream,
                         t: float = 1.0, horizon: Optional[int] = None) -> GoFReport:
    """
    KS test of the rescaled h-transform walk at time tN against the Bessel-3
    marginal at time t, started from the rescaled lattice start point.
    """
    if x < 0 or not 0.0 < t <= 1.0:
        raise ValueError("need x >= 0 and 0 < t <= 1")
    unit = require_lattice(env)
    horizon = horizon or get_config().simulation.dp_horizon
    sigma = env.model.sigma
    z0 = int(round(x * math.sqrt(N) * sigma / unit))
    y = z0 * unit
    x_eff = y / (math.sqrt(N) * sigma)
    m = max(1, int(round(t * N)))
    terminal = N + horizon
    law = conditioned_marginal(env, y, m, terminal)
    z_max = reachable_z_max(env, y, m)
    if _fits_path_table(m, z_max):
        rows = backward_rows(env, 0, terminal, z_max, record=range(m + 1))
        utable = UTable(N=m, horizon=terminal - m, unit=unit,
                        entries=np.vstack([rows[n] for n in range(m + 1)]), seed=env.seed)
        ensemble = conditioned_ensemble(env, y, m, utable, n_samples, stream.substream("paths"))
        indices = np.rint(ensemble.endpoints() / unit)
    else:
        indices = _sample_law(law, n_samples, stream.substream("endpoints")).astype(float)
    scale = unit / (math.sqrt(N) * sigma)
    values = jitter_lattice(indices, law.span, scale, stream.substream("jitter").generator(0))
    report = ks_test(values, lambda c: bessel3_cdf(c, x_eff, t), target=bessel3_target(x_eff, t),
                     seed=env.seed, model=model_hash(env.model))
    logger.info(f"Bessel-3 KS x={x_eff:.4g} t={t} N={N}: D={report.statistic:.4g} p={report.p_value:.4g}")
    return report


def brownian_rejection_oracle(x: float, t: float, n_samples: int, stream: RandomStream,
                              grid_steps: int = ORACLE_GRID_STEPS) -> OracleReport:
    """
    Compare the closed Bessel-3 CDF with a direct simulation.

    For x > 0, Brownian paths from x are killed at 0 on a time grid, with the
    crossing probability exp(-2ab/dt) of the bridge between grid values a and
    b, and the survivors are reweighted by z / x. For x = 0 the endpoint is the
    norm of a 3-dimensional Brownian motion.
    """
    if x < 0 or t <= 0:
        raise ValueError("need x >= 0 and t > 0")
    rng = stream.generator(0)
    if x == 0.0:
        ends = np.linalg.norm(rng.normal(0.0, math.sqrt(t), size=(n_samples, 3)), axis=1)
        weights = np.ones(n_samples)
    else:
        dt = t / grid_steps
        position = np.full(n_samples, float(x))
        alive = np.ones(n_samples, dtype=bool)
        for _ in range(grid_steps):
            following = position + rng.normal(0.0, math.sqrt(dt), size=n_samples)
            crossed = rng.random(n_samples) < np.exp(-2.0 * np.clip(position, 0, None) * np.clip(following, 0, None) / dt)
            alive &= (following > 0.0) & ~crossed
            position = following
        ends = position[alive]
        weights = ends / x
    order = np.argsort(ends)
    ends, weights = ends[order], weights[order]
    if ends.size == 0:
        raise EmptySample("no Brownian path survived")
    empirical = np.cumsum(weights) / weights.sum()
    target = bessel3_cdf(ends, x, t)
    discrepancy = float(max(np.max(np.abs(empirical - target)),
                            np.max(np.abs(empirical - weights / weights.sum() - target))))
    effective = weights.sum() ** 2 / np.sum(weights ** 2)
    tolerance = math.sqrt(math.log(2.0 / ORACLE_ALPHA) / (2.0 * effective))
    return OracleReport(x=x, t=t, n_samples=n_samples, max_cdf_discrepancy=discrepancy,
                        passed=discrepancy < tolerance)


def survival_asymptotics_report(env: Environment, y: float, n_list: Sequence[int],
                                horizon: Optional[int] = None) -> AsymptoticRatioReport:
    """
    Ratios of P_xi(tau_y > n) to sqrt(2) U(xi, y) / (sqrt(pi n) sigma), with U
    taken from the horizon-H DP. Only the final ratio is held to the band.
    """
    if not n_list or list(n_list) != sorted(set(n_list)) or n_list[0] < 1:
        raise ValueError("n_list must be positive and strictly increasing")
    settings = get_config()
    horizon = horizon or settings.simulation.dp_horizon
    wanted = set(n_list)
    survival = {}
    moments = {}

    def observe(m, dist):
        if m in wanted:
            survival[m] = dist.alive_mass
        if m == horizon:
            moments[m] = dist.first_moment()

    evolve(env, y, max(horizon, n_list[-1]), observe)
    U = moments[horizon]
    sigma = env.model.sigma
    band = settings.statistics.ratio_band
    rows = []
    for n in n_list:
        predicted = math.sqrt(2.0) * U / (math.sqrt(math.pi * n) * sigma)
        ratio = survival[n] / predicted
        if abs(ratio - 1.0) > band and n != n_list[-1]:
            logger.warning(f"Preasymptotic survival ratio {ratio:.4f} at n={n}")
        rows.append(RatioRow(n=n, exact=survival[n], predicted=predicted, ratio=ratio))
    final = rows[-1].ratio
    return AsymptoticRatioReport(rows=rows, band=band, passed=abs(final - 1.0) <= band)


def fkg_check(env: Environment, y: float, n: int, x_grid: Optional[Sequence[float]] = None) -> FKGReport:
    """
    min over x of P_xi(S_n > x, tau_y > n) - P_xi(S_n > x) P_xi(tau_y > n),
    both sides from exact DP; the default grid is every reachable x plus one
    point beyond each end.
    """
    unit = require_lattice(env)
    killed = evolve(env, y, n)
    offset, free = free_distribution(env, y, n)
    z0 = to_lattice_index(y, unit)
    if x_grid is None:
        x_grid = [(offset - 1 + i - z0) * unit for i in range(free.size + 2)]
    survival = killed.alive_mass
    alive_tail = np.concatenate((np.cumsum(killed.alive[::-1])[::-1], [0.0]))
    free_tail = np.concatenate((np.cumsum(free[::-1])[::-1], [0.0]))
    worst_slack, worst_x = math.inf, 0.0
    for x in x_grid:
        # positions y + S_n strictly above y + x
        threshold = math.floor((y + x) / unit + 1e-9)
        first_alive = min(max(threshold + 1, 0), killed.alive.size)
        first_free = min(max(threshold + 1 - offset, 0), free.size)
        lhs = alive_tail[first_alive]
        rhs = free_tail[first_free] * survival
        slack = float(lhs - rhs)
        if slack < worst_slack:
            worst_slack, worst_x = slack, float(x)
    return FKGReport(y=y, n=n, worst_slack=worst_slack, worst_x=worst_x, passed=worst_slack >= -1e-10)


def lemma_bound_check(env: Environment, y: float, n_list: Sequence[int]) -> LemmaBoundReport:
    """
    P_xi(tau_y > n) < 3 E_xi(y + S_n; tau_y > n) / (sqrt(n) sigma) along n_list;
    reports the first tested n where it holds and whether it keeps holding.
    """
    if not n_list or list(n_list) != sorted(set(n_list)) or n_list[0] < 1:
        raise ValueError("n_list must be positive and strictly increasing")
    sigma = env.model.sigma
    wanted = set(n_list)
    rows = []

    def observe(m, dist):
        if m in wanted:
            survival = dist.alive_mass
            bound = 3.0 * dist.first_moment() / (math.sqrt(m) * sigma)
            rows.append(LemmaBoundRow(n=m, survival=survival, bound=bound, holds=survival < bound))

    evolve(env, y, n_list[-1], observe)
    first_n = next((r.n for r in rows if r.holds), None)
    passed = first_n is not None and all(r.holds for r in rows if r.n >= first_n)
    return LemmaBoundReport(y=y, rows=rows, first_n=first_n, passed=passed)


def default_y_rule(unit: float) -> Callable[[int], float]:
    """y_n = ceil(sqrt n) rounded up to the lattice."""
    return lambda n: math.ceil(math.ceil(math.sqrt(n)) / unit - 1e-9) * unit


def slope_shift_test(env: Environment, n_list: Sequence[int], y_rule: Optional[Callable[[int], float]] = None,
                     horizon: Optional[int] = None) -> SlopeShiftReport:
    """
    U(theta^n xi, y_n) / y_n along n_list with U from the horizon-H DP; all
    ratios must be >= 1 and the final one in the configured band.
    """
    if not n_list:
        raise ValueError("n_list must be nonempty")
    settings = get_config()
    horizon = horizon or settings.simulation.dp_horizon
    unit = require_lattice(env)
    y_rule = y_rule or default_y_rule(unit)
    points = []
    for n in n_list:
        y_n = y_rule(n)
        if y_n <= 0:
            raise ValueError(f"y_rule must be positive (y_{n} = {y_n})")
        z = to_lattice_index(y_n, unit)
        U = float(harmonic_sweep(env, n, n + horizon, z)[z])
        points.append((int(n), float(y_n), U, U / y_n))
    lower = all(ratio >= 1.0 - 1e-12 for *_, ratio in points)
    final_ratio = points[-1][3]
    band = settings.statistics.ratio_band
    return SlopeShiftReport(points=points, lower_bound_holds=lower, final_ratio=final_ratio,
                            band=band, passed=lower and abs(final_ratio - 1.0) <= band)
