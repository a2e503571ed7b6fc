"""
Walks conditioned to stay positive.

Two conditionings are sampled: the meander P_xi(. | tau_0 > N), by rejection
and exactly through a backward survival table, and the Doob h-transform of the
killed walk with weights from a UTable. Exact marginal laws back the large-N
limit tests.
"""

import logging
from collections import Counter
from typing import Dict, Optional, Tuple

import numpy as np

from config import get_config
from rwre_toolkit.errors import RejectionBudgetExceeded, TableMiss, ZeroMass
from rwre_toolkit.models import (
    ConditionedKernel,
    LatticeLaw,
    Path,
    PathEnsemble,
    PrefixStabilityReport,
    RejectionResult,
    UTable,
)
from rwre_toolkit.tools.environment import Environment, kill_level, step_table, to_lattice_index
from rwre_toolkit.tools.harmonic import (
    PAYOFF_SURVIVAL,
    backward_rows,
    harmonic_sweep,
)
from rwre_toolkit.tools.walk import (
    draw_increments,
    evolve,
    require_lattice,
    survival_probability_exact,
)
from services.rng import RandomStream, plan_chunks
from services.service_manager import service_manager

logger = logging.getLogger(__name__)

REJECTION_BATCH = 4096


# ----- h-transform -----

def h_transform_kernel(env: Environment, utable: UTable, n: int, y: float) -> ConditionedKernel:
    """
    One step of the h-transform from (n, y).

    Atom weights are P_xi(X_{n+1} = x) * U(theta^{n+1} xi, y + x) over
    destinations y + x > 0; their total is the normalizer, which equals the
    table entry U(theta^n xi, y) up to truncation.

    Raises:
        ZeroMass: If no destination carries positive weight
        TableMiss: If the table does not cover (n + 1, y + x)
    """
    if y < 0 or (y == 0 and n != 0):
        raise ValueError("the conditioned walk is only defined from y > 0 (or y = 0 at n = 0)")
    if n + 1 > utable.N:
        raise TableMiss(f"shift {n + 1} outside table range 0..{utable.N}")
    level = kill_level(env.model)
    destinations, weights = [], []
    for value, prob in env.law(n + 1).atoms():
        destination = y + value
        if destination <= level:
            continue
        weight = prob * utable.value(n + 1, destination)
        if weight > 0.0:
            destinations.append(destination)
            weights.append(weight)
    normalizer = float(sum(weights))
    if normalizer <= 0.0:
        raise ZeroMass(f"no positive destination from y={y} at time {n}")
    return ConditionedKernel(
        time=n,
        source=y,
        destinations=tuple(destinations),
        probs=tuple(w / normalizer for w in weights),
        normalizer=normalizer,
        table_value=utable.value(n, y),
    )


def _h_transform_chunk(env: Environment, y: float, N: int, utable: UTable, stream: RandomStream,
                       chunk_index: int, count: int) -> np.ndarray:
    table = step_table(env.model)
    rng = stream.generator(chunk_index)
    z = np.full(count, to_lattice_index(y, utable.unit), dtype=np.int64)
    positions = np.empty((count, N + 1), dtype=np.int64)
    positions[:, 0] = z
    letters = env.letters(1, N)
    for m in range(N):
        steps, probs = table.lattice_atoms(letters[m])
        destinations = z[:, None] + steps[None, :]
        if destinations.max() > utable.z_max:
            raise TableMiss(f"position {destinations.max() * utable.unit} outside table range at shift {m + 1}")
        row = utable.row(m + 1)
        weights = probs[None, :] * np.where(destinations > 0, row[np.clip(destinations, 0, None)], 0.0)
        totals = weights.sum(axis=1)
        if np.any(totals <= 0.0):
            raise ZeroMass(f"no positive destination at time {m}")
        cum = np.cumsum(weights, axis=1) / totals[:, None]
        cum[:, -1] = 1.0
        choice = (rng.random(count)[:, None] >= cum).sum(axis=1)
        z = destinations[np.arange(count), choice]
        positions[:, m + 1] = z
    return positions * utable.unit


def conditioned_ensemble(env: Environment, y: float, N: int, utable: UTable, n_samples: int,
                         stream: RandomStream) -> PathEnsemble:
    """h-transform paths of length N from y, parallel over chunks."""
    if N > utable.N:
        raise TableMiss(f"path length {N} exceeds table range 0..{utable.N}")
    env.materialize(N)
    tasks = [(env, y, N, utable, stream, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    blocks = service_manager.map_chunks(_h_transform_chunk, tasks)
    return PathEnsemble(y=y, positions=np.vstack(blocks), method="h-transform")


def conditioned_sample(env: Environment, y: float, N: int, utable: UTable, stream: RandomStream,
                       index: int = 0) -> Path:
    """One h-transform path of length N; it never enters (-inf, 0]."""
    rng = stream.generator(index)
    position = y
    steps = []
    for n in range(N):
        kernel = h_transform_kernel(env, utable, n, position)
        cum = np.cumsum(kernel.probs)
        cum[-1] = 1.0
        destination = kernel.destinations[int(np.searchsorted(cum, rng.random(), side="right"))]
        steps.append(destination - position)
        position = destination
    return Path(y=y, steps=tuple(steps))


def conditioned_marginal(env: Environment, y: float, m: int, terminal: int) -> LatticeLaw:
    """
    Exact law of y + S_m under the h-transform with terminal time T:
    P_xi(y + S_m = z, tau_y > m) * U_{T-m}(theta^m xi, z), normalized.
    """
    if not 0 <= m <= terminal:
        raise ValueError("need 0 <= m <= terminal")
    unit = require_lattice(env)
    alive = evolve(env, y, m).alive
    weights = harmonic_sweep(env, m, terminal, alive.size - 1)
    mass = alive * weights
    if mass.sum() <= 0.0:
        raise ZeroMass(f"conditioned marginal at m={m} from y={y} has no mass")
    return LatticeLaw(unit=unit, positions=np.arange(alive.size), probs=mass)


def conditioned_path_law(env: Environment, y: float, N: int, utable: UTable) -> Dict[Tuple[float, ...], float]:
    """Exact h-transform probability of every length-N path from y (keys are y + S_1..y + S_N)."""
    law: Dict[Tuple[float, ...], float] = {(): 1.0}
    position: Dict[Tuple[float, ...], float] = {(): y}
    for n in range(N):
        next_law: Dict[Tuple[float, ...], float] = {}
        next_position: Dict[Tuple[float, ...], float] = {}
        for prefix, prob in law.items():
            kernel = h_transform_kernel(env, utable, n, position[prefix])
            for destination, p in zip(kernel.destinations, kernel.probs):
                key = prefix + (destination,)
                next_law[key] = prob * p
                next_position[key] = destination
        law, position = next_law, next_position
    return law


# ----- Meander: rejection -----

def rejection_budget(env: Environment, N: int) -> int:
    """Proposal cap: factor / P(tau_0 > N) with the exact survival when available."""
    settings = get_config().simulation
    if env.model.is_lattice:
        survival = survival_probability_exact(env, 0.0, N)
        if survival > 0.0:
            return int(min(np.ceil(settings.rejection_budget_factor / survival), settings.max_rejection_proposals))
    return settings.max_rejection_proposals


def _propose_until(env: Environment, N: int, rng: np.random.Generator, wanted: int,
                   budget: int) -> Tuple[np.ndarray, int]:
    lattice = env.model.is_lattice
    level = 0 if lattice else kill_level(env.model)
    accepted = []
    proposals = 0
    found = 0
    while found < wanted:
        if proposals >= budget:
            raise RejectionBudgetExceeded(
                f"{proposals} proposals yielded {found}/{wanted} meander paths at N={N}"
            )
        batch = int(min(REJECTION_BATCH, budget - proposals))
        steps = draw_increments(env, 1, N, rng, batch, lattice=lattice)
        sums = np.cumsum(steps, axis=1)
        ok = np.flatnonzero((sums > level).all(axis=1))
        take = ok[:wanted - found]
        if take.size:
            accepted.append(sums[take])
        found += take.size
        # proposals up to and including the last accepted one
        proposals += int(take[-1]) + 1 if found == wanted else batch
    positions = np.zeros((wanted, N + 1))
    positions[:, 1:] = np.vstack(accepted)
    if lattice:
        positions *= env.model.lattice_unit
    return positions, proposals


def meander_sample_rejection(env: Environment, N: int, stream: RandomStream, index: int = 0,
                             budget: Optional[int] = None) -> RejectionResult:
    """
    Propose unconditioned paths from 0 until one has tau_0 > N.

    Raises:
        RejectionBudgetExceeded: If the proposal cap is reached first
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    budget = budget or rejection_budget(env, N)
    positions, proposals = _propose_until(env, N, stream.generator(index), 1, budget)
    return RejectionResult(path=Path(y=0.0, steps=tuple(np.diff(positions[0]))), proposals=proposals)


def _rejection_chunk(env: Environment, N: int, stream: RandomStream, budget: int,
                     chunk_index: int, count: int) -> Tuple[np.ndarray, int]:
    return _propose_until(env, N, stream.generator(chunk_index), count, budget * count)


def meander_rejection_ensemble(env: Environment, N: int, n_samples: int, stream: RandomStream,
                               budget: Optional[int] = None) -> PathEnsemble:
    """Rejection meander paths; the ensemble records the total number of proposals."""
    budget = budget or rejection_budget(env, N)
    env.materialize(N)
    tasks = [(env, N, stream, budget, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    results = service_manager.map_chunks(_rejection_chunk, tasks)
    proposals = sum(r[1] for r in results)
    logger.debug(f"Rejection meander N={N}: {n_samples} accepted of {proposals} proposals")
    return PathEnsemble(y=0.0, positions=np.vstack([r[0] for r in results]),
                        method="rejection", proposals=proposals)


# ----- Meander: exact DP -----

def meander_table(env: Environment, N: int) -> np.ndarray:
    """
    h[m, z] = P_{theta^m xi}(tau_z > N - m) for m = 0..N, z = 0..N * max_up.

    Raises:
        LatticeMismatch: If the model has no lattice
        ValueError: If the table exceeds the configured cell cap
    """
    require_lattice(env)
    z_max = N * max(step_table(env.model).max_up, 0)
    cells = (N + 1) * (z_max + 1)
    cap = get_config().simulation.max_table_cells
    if cells > cap:
        raise ValueError(f"meander table of {cells} cells exceeds the cap of {cap}")
    rows = backward_rows(env, 0, N, z_max, record=range(N + 1), payoff=PAYOFF_SURVIVAL)
    return np.vstack([rows[m] for m in range(N + 1)])


def _meander_dp_chunk(env: Environment, N: int, survival: np.ndarray, stream: RandomStream,
                      chunk_index: int, count: int) -> np.ndarray:
    table = step_table(env.model)
    rng = stream.generator(chunk_index)
    z = np.zeros(count, dtype=np.int64)
    positions = np.zeros((count, N + 1), dtype=np.int64)
    letters = env.letters(1, N)
    for m in range(N):
        steps, probs = table.lattice_atoms(letters[m])
        destinations = z[:, None] + steps[None, :]
        row = survival[m + 1]
        weights = probs[None, :] * np.where(destinations > 0, row[np.clip(destinations, 0, row.size - 1)], 0.0)
        cum = np.cumsum(weights, axis=1)
        cum /= cum[:, -1:]
        cum[:, -1] = 1.0
        choice = (rng.random(count)[:, None] >= cum).sum(axis=1)
        z = destinations[np.arange(count), choice]
        positions[:, m + 1] = z
    return positions * table.unit


def meander_ensemble_dp(env: Environment, N: int, n_samples: int, stream: RandomStream,
                        survival: Optional[np.ndarray] = None) -> PathEnsemble:
    """Exact meander paths: forward steps reweighted by the survival table; no rejections."""
    survival = meander_table(env, N) if survival is None else survival
    if survival[0, 0] <= 0.0:
        raise ZeroMass(f"P(tau_0 > {N}) is zero")
    env.materialize(N)
    tasks = [(env, N, survival, stream, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    blocks = service_manager.map_chunks(_meander_dp_chunk, tasks)
    return PathEnsemble(y=0.0, positions=np.vstack(blocks), method="dp", proposals=0)


def meander_sample_dp(env: Environment, N: int, stream: RandomStream, index: int = 0,
                      survival: Optional[np.ndarray] = None) -> Path:
    """One exact meander path of length N."""
    survival = meander_table(env, N) if survival is None else survival
    positions = _meander_dp_chunk(env, N, survival, stream, index, 1)[0]
    return Path(y=0.0, steps=tuple(float(s) for s in np.diff(positions)))


def meander_marginal(env: Environment, N: int, m: int) -> LatticeLaw:
    """
    Exact law of S_m under P_xi(. | tau_0 > N): the killed DP at time m times
    the survival of the remaining N - m steps, normalized.
    """
    if not 0 <= m <= N:
        raise ValueError("need 0 <= m <= N")
    unit = require_lattice(env)
    alive = evolve(env, 0.0, m).alive
    survival = harmonic_sweep(env, m, N, alive.size - 1, payoff=PAYOFF_SURVIVAL)
    mass = alive * survival
    if mass.sum() <= 0.0:
        raise ZeroMass(f"P(tau_0 > {N}) is zero")
    return LatticeLaw(unit=unit, positions=np.arange(alive.size), probs=mass)


def meander_path_law(env: Environment, N: int) -> Dict[Tuple[float, ...], float]:
    """Exact meander probability of every surviving length-N path (keys are S_1..S_N)."""
    unit = require_lattice(env)
    survival = meander_table(env, N)
    table = step_table(env.model)
    law: Dict[Tuple[int, ...], float] = {(): 1.0}
    ends: Dict[Tuple[int, ...], int] = {(): 0}
    for m in range(N):
        steps, probs = table.lattice_atoms(env.letter(m + 1))
        next_law, next_ends = {}, {}
        for prefix, prob in law.items():
            z = ends[prefix]
            base = survival[m, z]
            for k, p in zip(steps, probs):
                destination = z + int(k)
                if destination <= 0:
                    continue
                weight = p * survival[m + 1, destination] / base
                if weight > 0.0:
                    key = prefix + (destination,)
                    next_law[key] = prob * weight
                    next_ends[key] = destination
        law, ends = next_law, next_ends
    return {tuple(z * unit for z in key): p for key, p in law.items()}


# ----- Prefix stability -----

def _prefix_counts(positions: np.ndarray, prefix: int, weights: Optional[np.ndarray] = None) -> Dict[tuple, float]:
    counts: Counter = Counter()
    keys = [tuple(row) for row in np.round(positions[:, 1:prefix + 1], 9)]
    if weights is None:
        weights = np.ones(len(keys))
    for key, w in zip(keys, weights):
        counts[key] += float(w)
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def prefix_stability_check(env: Environment, N: int, prefix: int, n_samples: int, stream: RandomStream,
                           horizon: Optional[int] = None, tolerance: float = 0.02) -> PrefixStabilityReport:
    """
    Total-variation distance on the first `prefix` steps between the meander
    reweighted by U(theta^N xi, S_N) / U(xi, 0) and the h-transform from 0.
    """
    if not 1 <= prefix <= N:
        raise ValueError("need 1 <= prefix <= N")
    horizon = horizon or get_config().simulation.dp_horizon
    terminal = N + horizon
    meander = meander_ensemble_dp(env, N, n_samples, stream.substream("meander"))
    unit = require_lattice(env)
    end_index = np.rint(meander.endpoints() / unit).astype(np.int64)
    weights_row = harmonic_sweep(env, N, terminal, int(end_index.max()))
    weighted = _prefix_counts(meander.positions, prefix, weights_row[end_index])

    z_max = prefix * max(step_table(env.model).max_up, 0)
    rows = backward_rows(env, 0, terminal, z_max, record=range(prefix + 1))
    utable = UTable(N=prefix, horizon=terminal - prefix, unit=unit,
                    entries=np.vstack([rows[n] for n in range(prefix + 1)]), seed=env.seed)
    conditioned = conditioned_ensemble(env, 0.0, prefix, utable, n_samples, stream.substream("h-transform"))
    direct = _prefix_counts(conditioned.positions, prefix)

    keys = set(weighted) | set(direct)
    tv = 0.5 * sum(abs(weighted.get(k, 0.0) - direct.get(k, 0.0)) for k in keys)
    return PrefixStabilityReport(N=N, prefix=prefix, n_samples=n_samples, tv_distance=tv, passed=tv < tolerance)
