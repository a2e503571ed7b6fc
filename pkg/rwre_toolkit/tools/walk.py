"""
Quenched walk sampling, first passage below zero, the killed-walk lattice DP
and the rescaling map onto [0, 1].

The kill boundary is closed: the walk is killed at the first n >= 1 with
y + S_n <= 0.
"""

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from config import get_config
from rwre_toolkit.errors import HorizonTooShort, LatticeMismatch
from rwre_toolkit.models import (
    FirstPassageSample,
    LatticeDistribution,
    Path,
    PathEnsemble,
    RescaledPath,
    StepLaw,
)
from rwre_toolkit.tools.environment import (
    Environment,
    kill_level,
    lattice_start,
    law_steps,
    step_table,
    to_lattice_index,
)
from services.rng import RandomStream, plan_chunks
from services.service_manager import service_manager

logger = logging.getLogger(__name__)

# Work per vectorized first-passage block (samples x steps)
BLOCK_CELLS = 1 << 20
MIN_BLOCK_STEPS = 256
MAX_BLOCK_STEPS = 1 << 16


# ----- Sampling -----

def _draw_atoms(env: Environment, start: int, count: int, rng: np.random.Generator,
                size: int) -> Tuple[np.ndarray, np.ndarray]:
    table = step_table(env.model)
    letters = env.letters(start, count)
    uniforms = rng.random((size, count))
    edges = table.edges[letters]
    atom = (uniforms[:, :, None] >= edges[None, :, :]).sum(axis=2)
    return letters[None, :], atom


def draw_increments(env: Environment, start: int, count: int, rng: np.random.Generator, size: int,
                    lattice: bool = False) -> np.ndarray:
    """
    Independent draws of X_start .. X_{start+count-1} for `size` walks; shape (size, count).

    With lattice=True the draws are integer multiples of the lattice unit. The
    random stream is consumed identically either way.
    """
    table = step_table(env.model)
    letters, atom = _draw_atoms(env, start, count, rng, size)
    if lattice:
        if table.steps is None:
            raise LatticeMismatch("model has no lattice unit")
        return table.steps[letters, atom]
    return table.values[letters, atom]


def _first_hit(positions: np.ndarray, level: float) -> Optional[int]:
    hits = np.flatnonzero(positions[1:] <= level)
    return int(hits[0]) + 1 if hits.size else None


def sample_path(env: Environment, y: float, horizon: int, stream: RandomStream, index: int = 0) -> Path:
    """
    One path of `horizon` steps; tau is filled when y + S_n <= 0 first happens
    within the horizon.

    On a lattice, tau is found on integer positions so that sums such as
    1 - 1/3 - 1/3 - 1/3 reach 0 exactly.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if y < 0:
        raise ValueError("start offset y must be nonnegative")
    table = step_table(env.model)
    letters, atom = _draw_atoms(env, 1, horizon, stream.generator(index), 1)
    steps = table.values[letters, atom][0]
    start = lattice_start(env.model, y)
    if start is not None:
        tau = _first_hit(start + np.concatenate(([0], np.cumsum(table.steps[letters, atom][0]))), 0)
    else:
        tau = _first_hit(y + np.concatenate(([0.0], np.cumsum(steps))), kill_level(env.model))
    return Path(y=y, steps=tuple(float(s) for s in steps), tau=tau)


def _sample_paths_chunk(env: Environment, y: float, horizon: int, stream: RandomStream,
                        chunk_index: int, count: int) -> np.ndarray:
    start = lattice_start(env.model, y)
    lattice = start is not None
    steps = draw_increments(env, 1, horizon, stream.generator(chunk_index), count, lattice=lattice)
    positions = np.empty((count, horizon + 1), dtype=steps.dtype)
    positions[:, 0] = 0
    np.cumsum(steps, axis=1, out=positions[:, 1:])
    if lattice:
        return (positions + start) * env.model.lattice_unit
    return positions + y


def sample_paths(env: Environment, y: float, horizon: int, n_samples: int, stream: RandomStream) -> PathEnsemble:
    """Unconditioned paths, parallel over fixed-size chunks."""
    env.materialize(horizon)
    tasks = [(env, y, horizon, stream, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    blocks = service_manager.map_chunks(_sample_paths_chunk, tasks)
    return PathEnsemble(y=y, positions=np.vstack(blocks), method="free")


# ----- First passage -----

def _first_passage_block(env: Environment, y: float, n_max: int, rng: np.random.Generator,
                         size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simulate `size` walks until first passage or n_max.

    Positions are tracked in integer lattice units when y is on the lattice,
    otherwise as floats killed at kill_level.

    Returns:
        (tau, terminal): tau = 0 marks a censored sample, whose terminal is
        the surviving value y + S_{n_max}.
    """
    start = lattice_start(env.model, y)
    lattice = start is not None
    level = 0 if lattice else kill_level(env.model)
    tau = np.zeros(size, dtype=np.int64)
    position = np.full(size, start, dtype=np.int64) if lattice else np.full(size, float(y))
    active = np.arange(size)
    t = 0
    while active.size and t < n_max:
        block = int(np.clip(BLOCK_CELLS // active.size, MIN_BLOCK_STEPS, MAX_BLOCK_STEPS))
        block = min(block, n_max - t)
        increments = draw_increments(env, t + 1, block, rng, active.size, lattice=lattice)
        trajectory = position[active, None] + np.cumsum(increments, axis=1)
        hit = trajectory <= level
        killed = hit.any(axis=1)
        first = hit.argmax(axis=1)
        rows = np.flatnonzero(killed)
        tau[active[rows]] = t + first[rows] + 1
        position[active[rows]] = trajectory[rows, first[rows]]
        survivors = ~killed
        position[active[survivors]] = trajectory[survivors, -1]
        active = active[survivors]
        t += block
    if lattice:
        return tau, position * env.model.lattice_unit
    # killed values within the tolerance band are rounding zeros
    return tau, np.where(tau > 0, np.minimum(position, 0.0), position)


def first_passage(env: Environment, y: float, n_max: int, stream: RandomStream, index: int = 0) -> FirstPassageSample:
    """Simulate until tau_y or n_max; censoring is recorded, never dropped."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    tau, terminal = _first_passage_block(env, y, n_max, stream.generator(index), 1)
    return FirstPassageSample(tau=int(tau[0]) or None, n_max=n_max, terminal=float(terminal[0]))


def _first_passage_chunk(env: Environment, y: float, n_max: int, stream: RandomStream,
                         chunk_index: int, count: int) -> Tuple[np.ndarray, np.ndarray]:
    return _first_passage_block(env, y, n_max, stream.generator(chunk_index), count)


def first_passage_batch(env: Environment, y: float, n_max: int, n_samples: int,
                        stream: RandomStream) -> Tuple[np.ndarray, np.ndarray]:
    """Chunked first-passage samples; tau = 0 marks censoring."""
    env.materialize(n_max)
    tasks = [(env, y, n_max, stream, index, stop - start)
             for index, start, stop in plan_chunks(n_samples, service_manager.chunk_size)]
    results = service_manager.map_chunks(_first_passage_chunk, tasks)
    tau = np.concatenate([r[0] for r in results])
    terminal = np.concatenate([r[1] for r in results])
    return tau, terminal


# ----- Lattice DP -----

def require_lattice(env: Environment) -> float:
    unit = env.model.lattice_unit
    if unit is None:
        raise LatticeMismatch("model has no lattice unit; exact DP is unavailable")
    return unit


def initial_distribution(y: float, unit: float) -> LatticeDistribution:
    """Point mass at y (time 0)."""
    if y < 0:
        raise ValueError("start offset y must be nonnegative")
    z = to_lattice_index(y, unit)
    alive = np.zeros(z + 1)
    alive[z] = 1.0
    return LatticeDistribution(time=0, unit=unit, alive=alive)


def _advance(alive: np.ndarray, killed: Dict[int, float], steps: np.ndarray, probs: np.ndarray,
             prune_threshold: float) -> Tuple[np.ndarray, float]:
    size = alive.size
    new = np.zeros(size + max(0, int(steps.max())))
    for k, p in zip(steps, probs):
        k = int(k)
        lo = max(0, 1 - k)
        if lo < size:
            new[lo + k:size + k] += p * alive[lo:]
        for i in np.flatnonzero(alive[:min(lo, size)]):
            killed[int(i) + k] = killed.get(int(i) + k, 0.0) + p * alive[i]
    pruned = 0.0
    if prune_threshold > 0.0:
        tiny = (new > 0.0) & (new < prune_threshold)
        if tiny.any():
            pruned = float(new[tiny].sum())
            new[tiny] = 0.0
    nonzero = np.flatnonzero(new)
    new = new[:nonzero[-1] + 1] if nonzero.size else new[:1]
    return new, pruned


def lattice_dp_step(dist: LatticeDistribution, law: StepLaw,
                    prune_threshold: Optional[float] = None) -> LatticeDistribution:
    """
    Push alive mass through one step law; mass landing at or below 0 moves to
    the killed ledger.

    Raises:
        LatticeMismatch: If an atom is not on the lattice of dist
    """
    if prune_threshold is None:
        prune_threshold = get_config().simulation.prune_threshold
    killed = dict(dist.killed)
    alive, pruned = _advance(dist.alive, killed, law_steps(law, dist.unit), np.asarray(law.probs), prune_threshold)
    return LatticeDistribution(time=dist.time + 1, unit=dist.unit, alive=alive,
                               killed=killed, pruned_mass=dist.pruned_mass + pruned)


def evolve(env: Environment, y: float, n: int,
           observer: Optional[Callable[[int, LatticeDistribution], None]] = None) -> LatticeDistribution:
    """
    Killed-walk law at time n started from y; observer(m, dist) is called for
    m = 0..n.
    """
    unit = require_lattice(env)
    prune_threshold = get_config().simulation.prune_threshold
    table = step_table(env.model)
    dist = initial_distribution(y, unit)
    if observer:
        observer(0, dist)
    if n <= 0:
        return dist
    letters = env.letters(1, n)
    killed = dict(dist.killed)
    alive = dist.alive
    pruned_total = 0.0
    for m in range(1, n + 1):
        steps, probs = table.lattice_atoms(letters[m - 1])
        alive, pruned = _advance(alive, killed, steps, probs, prune_threshold)
        pruned_total += pruned
        if observer:
            observer(m, LatticeDistribution(time=m, unit=unit, alive=alive, killed=killed, pruned_mass=pruned_total))
    if pruned_total > 1e-12:
        logger.warning(f"DP from y={y} over {n} steps pruned {pruned_total:.3e} of mass")
    return LatticeDistribution(time=n, unit=unit, alive=alive, killed=dict(killed), pruned_mass=pruned_total)


def survival_probability_exact(env: Environment, y: float, n: int) -> float:
    """P_xi(tau_y > n) by n DP steps."""
    if n <= 0:
        require_lattice(env)
        return 1.0
    return evolve(env, y, n).alive_mass


def survival_curve(env: Environment, y: float, n_list) -> Dict[int, float]:
    """P_xi(tau_y > n) for every n in n_list from a single DP pass."""
    wanted = set(int(n) for n in n_list)
    out: Dict[int, float] = {}

    def observe(m, dist):
        if m in wanted:
            out[m] = dist.alive_mass

    evolve(env, y, max(wanted) if wanted else 0, observe)
    return out


def free_distribution(env: Environment, y: float, n: int) -> Tuple[int, np.ndarray]:
    """
    Law of y + S_n without killing.

    Returns:
        (offset, mass) where mass[i] is the probability of lattice index offset + i
    """
    unit = require_lattice(env)
    table = step_table(env.model)
    offset = to_lattice_index(y, unit)
    mass = np.ones(1)
    for letter in env.letters(1, n) if n > 0 else []:
        steps, probs = table.lattice_atoms(letter)
        lo, hi = int(steps.min()), int(steps.max())
        new = np.zeros(mass.size + hi - lo)
        for k, p in zip(steps, probs):
            new[k - lo:k - lo + mass.size] += p * mass
        mass = new
        offset += lo
    return offset, mass


# ----- Rescaling -----

def rescale(path: Path, N: int, sigma: float) -> RescaledPath:
    """
    phi_N: t -> (y + S_(Nt)) / (sqrt(N) sigma) on the grid k/N; RescaledPath.at
    interpolates linearly in between.
    """
    if N < 1 or sigma <= 0:
        raise ValueError("N must be >= 1 and sigma > 0")
    if path.horizon < N:
        raise HorizonTooShort(f"path has {path.horizon} steps, rescaling needs {N}")
    values = path.positions()[:N + 1] / (np.sqrt(N) * sigma)
    return RescaledPath(N=N, values=tuple(float(v) for v in values))
