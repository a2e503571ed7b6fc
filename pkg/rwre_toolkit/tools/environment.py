"""
Environment families, seeded realizations and the shift operator.

Three stationary-ergodic families are supported: i.i.d. letters over a finite
alphabet, an irreducible Markov chain over the alphabet (started from its
stationary law) and a deterministic periodic rotation.
"""

import logging
import threading
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache, reduce
from math import gcd
from typing import List, Optional

import numpy as np

from rwre_toolkit.errors import (
    EmptyAlphabet,
    LatticeMismatch,
    ModelSpecError,
    NonCenteredLaw,
    NonStochastic,
    Reducible,
)
from rwre_toolkit.models import (
    AssumptionCheck,
    AssumptionReport,
    EnvironmentKind,
    EnvironmentModel,
    ModelSpec,
    StepLaw,
)
from services.rng import ENVIRONMENT_STREAM, stream_generator

logger = logging.getLogger(__name__)

CENTERING_TOLERANCE = 1e-12
RECENTER_HINT = 1e-6
WEIGHT_TOLERANCE = 1e-9
LATTICE_DENOMINATOR = 10**6
# A rational read of an atom must reproduce the float to this many ulps
LATTICE_ULPS = 4
BOUNDARY_TOLERANCE = 1e-9
REALIZATION_BLOCK = 4096


# ----- Lattice helpers -----

def _as_fraction(value: float) -> Optional[Fraction]:
    f = Fraction(value).limit_denominator(LATTICE_DENOMINATOR)
    if abs(float(f) - value) > LATTICE_ULPS * np.spacing(abs(value)):
        return None
    return f


def _fraction_gcd(a: Fraction, b: Fraction) -> Fraction:
    return Fraction(gcd(a.numerator * b.denominator, b.numerator * a.denominator),
                    a.denominator * b.denominator)


def detect_lattice_unit(alphabet) -> Optional[float]:
    """
    Largest h such that every atom value is an integer multiple of h.

    Values are read as rationals with denominators up to 10^6; None when some
    value is not such a rational.
    """
    fractions = []
    for law in alphabet:
        for v in law.values:
            if v == 0.0:
                continue
            f = _as_fraction(v)
            if f is None:
                return None
            fractions.append(abs(f))
    if not fractions:
        return 1.0
    unit = reduce(_fraction_gcd, fractions)
    logger.debug(f"Lattice unit {unit} from {len(fractions)} atoms")
    return float(unit)


def to_lattice_index(value: float, unit: float) -> int:
    """Integer k with value == k * unit."""
    k = int(round(value / unit))
    if abs(k * unit - value) > 1e-9 * max(1.0, abs(value)):
        raise LatticeMismatch(f"{value!r} is not a multiple of the lattice unit {unit!r}")
    return k


def lattice_start(model: EnvironmentModel, y: float) -> Optional[int]:
    """Lattice index of y, or None when the model or y is off the lattice."""
    if model.lattice_unit is None:
        return None
    try:
        return to_lattice_index(y, model.lattice_unit)
    except LatticeMismatch:
        return None


def kill_level(model: EnvironmentModel) -> float:
    """
    Float positions at or below this level are killed.

    Sums of on-lattice atoms that should be exactly 0 can land a few ulps
    above it (thirds, tenths), so the boundary sits BOUNDARY_TOLERANCE units up.
    """
    return BOUNDARY_TOLERANCE * (model.lattice_unit or 1.0)


def law_steps(law: StepLaw, unit: float) -> np.ndarray:
    return np.array([to_lattice_index(v, unit) for v in law.values], dtype=np.int64)


@dataclass(frozen=True)
class StepTable:
    """Alphabet laws padded to a common atom count, for vectorized draws and DP."""
    values: np.ndarray
    probs: np.ndarray
    edges: np.ndarray
    steps: Optional[np.ndarray]
    unit: Optional[float]

    @property
    def max_up(self) -> int:
        return int(self.steps.max()) if self.steps is not None else 0

    @property
    def max_down(self) -> int:
        return int(max(0, -self.steps.min())) if self.steps is not None else 0

    def lattice_atoms(self, letter: int):
        """(integer steps, probabilities) of one letter, zero-probability padding dropped."""
        if self.steps is None:
            raise LatticeMismatch("model has no lattice unit")
        keep = self.probs[letter] > 0.0
        return self.steps[letter][keep], self.probs[letter][keep]


@lru_cache(maxsize=64)
def step_table(model: EnvironmentModel) -> StepTable:
    width = max(len(law.values) for law in model.alphabet)
    size = len(model.alphabet)
    values = np.zeros((size, width))
    probs = np.zeros((size, width))
    cum = np.ones((size, width))
    for i, law in enumerate(model.alphabet):
        a = len(law.values)
        values[i, :a] = law.values
        probs[i, :a] = law.probs
        cum[i, :a] = np.cumsum(law.probs)
        cum[i, a - 1:] = 1.0
    steps = None
    if model.lattice_unit is not None:
        steps = np.zeros((size, width), dtype=np.int64)
        for i, law in enumerate(model.alphabet):
            steps[i, :len(law.values)] = law_steps(law, model.lattice_unit)
    return StepTable(values=values, probs=probs, edges=cum[:, :-1], steps=steps, unit=model.lattice_unit)


# ----- Model construction -----

def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    size = matrix.shape[0]
    system = np.vstack([matrix.T - np.eye(size), np.ones(size)])
    rhs = np.zeros(size + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def is_irreducible(matrix: np.ndarray) -> bool:
    size = matrix.shape[0]
    reach = ((matrix > 0.0) | np.eye(size, dtype=bool)).astype(np.int64)
    closure = np.linalg.matrix_power(reach, max(1, size - 1))
    return bool(np.all(closure > 0))


def _check_probability_vector(vector: List[float], key: str) -> np.ndarray:
    arr = np.asarray(vector, dtype=float)
    if arr.size == 0 or np.any(arr < 0.0) or abs(arr.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise NonStochastic(f"{key} must be nonnegative and sum to 1 (sum is {arr.sum()!r})", key=key)
    return arr / arr.sum()


def build_model(spec: ModelSpec, strict: bool = True) -> EnvironmentModel:
    """
    Validate a model description and precompute sigma^2 and the lattice unit.

    Args:
        spec: parsed model description
        strict: enforce quenched centering; validate_assumptions can still
            inspect models built with strict=False

    Raises:
        EmptyAlphabet, NonCenteredLaw, NonStochastic, Reducible, ModelSpecError
    """
    alphabet = tuple(spec.alphabet)
    size = len(alphabet)
    if size == 0:
        raise EmptyAlphabet("the alphabet must contain at least one step law", key="alphabet")

    if strict:
        for i, law in enumerate(alphabet):
            mean = law.mean
            if abs(mean) > CENTERING_TOLERANCE:
                hint = " (re-center the atom values)" if abs(mean) <= RECENTER_HINT else ""
                raise NonCenteredLaw(f"law {law.label()} has mean {mean!r}{hint}", key=f"alphabet.{i}")
            if not law.has_positive_atom:
                raise ModelSpecError(f"law {law.label()} has no positive atom", key=f"alphabet.{i}")

    weights = matrix = order = None
    if spec.kind == EnvironmentKind.iid:
        raw = spec.weights if spec.weights is not None else ([1.0] if size == 1 else None)
        if raw is None or len(raw) != size:
            raise NonStochastic(f"weights must list one probability per law ({size})", key="weights")
        stationary = _check_probability_vector(raw, "weights")
        weights = tuple(float(w) for w in stationary)
    elif spec.kind == EnvironmentKind.markov:
        if spec.matrix is None or len(spec.matrix) != size or any(len(r) != size for r in spec.matrix):
            raise NonStochastic(f"matrix must be {size}x{size}", key="matrix")
        rows = np.vstack([_check_probability_vector(r, f"matrix.{i}") for i, r in enumerate(spec.matrix)])
        if not is_irreducible(rows):
            raise Reducible("the transition matrix is not irreducible", key="matrix")
        stationary = stationary_distribution(rows)
        matrix = tuple(tuple(float(p) for p in r) for r in rows)
    else:
        raw_order = spec.order if spec.order is not None else list(range(size))
        if not raw_order or any(i < 0 or i >= size for i in raw_order):
            raise ModelSpecError(f"order must index the alphabet (0..{size - 1})", key="order")
        order = tuple(int(i) for i in raw_order)
        stationary = np.bincount(order, minlength=size) / len(order)

    if spec.lattice_unit is not None:
        try:
            for law in alphabet:
                law_steps(law, spec.lattice_unit)
        except LatticeMismatch as e:
            raise ModelSpecError(str(e), key="lattice_unit") from e
        lattice_unit = float(spec.lattice_unit)
    else:
        lattice_unit = detect_lattice_unit(alphabet)

    sigma2 = float(sum(p * law.second_moment for p, law in zip(stationary, alphabet)))
    model = EnvironmentModel(
        kind=spec.kind,
        alphabet=alphabet,
        weights=weights,
        matrix=matrix,
        order=order,
        stationary=tuple(float(p) for p in stationary),
        sigma2=sigma2,
        lattice_unit=lattice_unit,
    )
    logger.info(f"Built {spec.kind.value} model: {size} laws, sigma2={sigma2:.6g}, lattice_unit={lattice_unit}")
    return model


def validate_assumptions(model: EnvironmentModel) -> AssumptionReport:
    """Check centering, P(X > 0) > 0, moments and ergodicity; never raises."""
    checks = []
    for i, law in enumerate(model.alphabet):
        checks.append(AssumptionCheck(
            name=f"centered[{i}]",
            passed=abs(law.mean) <= CENTERING_TOLERANCE,
            detail=f"E X = {law.mean:.3e}",
        ))
        checks.append(AssumptionCheck(
            name=f"positive_atom[{i}]",
            passed=law.has_positive_atom,
            detail=f"max atom {law.max_value:g}",
        ))
    checks.append(AssumptionCheck(
        name="stochastic",
        passed=abs(sum(model.stationary) - 1.0) <= WEIGHT_TOLERANCE,
        detail=f"stationary mass {sum(model.stationary):.12g}",
    ))
    moment = model.annealed_abs_moment(3.0)
    checks.append(AssumptionCheck(
        name="moment_2_plus_epsilon",
        passed=bool(np.isfinite(moment)),
        detail=f"annealed E|X|^3 = {moment:.6g}",
    ))
    if model.kind == EnvironmentKind.markov:
        ergodic = is_irreducible(np.asarray(model.matrix))
    else:
        ergodic = True
    checks.append(AssumptionCheck(name="ergodic", passed=ergodic, detail=model.kind.value))
    return AssumptionReport(checks=checks, sigma2=model.sigma2, annealed_moment=moment, ergodic=ergodic)


# ----- Realizations -----

class _Realization:
    """Lazily extended letter sequence, a pure function of (model, seed)."""

    def __init__(self, model: EnvironmentModel, seed: int):
        self.model = model
        self.seed = int(seed)
        self._letters = np.empty(0, dtype=np.int32)
        self._markov_state: Optional[int] = None
        self._lock = threading.Lock()

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return self._letters.size

    def ensure(self, length: int) -> np.ndarray:
        if self._letters.size < length:
            with self._lock:
                blocks = [self._letters]
                produced = self._letters.size
                while produced < length:
                    block = self._next_block(produced // REALIZATION_BLOCK)
                    blocks.append(block)
                    produced += block.size
                self._letters = np.concatenate(blocks)
        return self._letters

    def _next_block(self, index: int) -> np.ndarray:
        model = self.model
        start = index * REALIZATION_BLOCK
        if model.kind == EnvironmentKind.periodic:
            order = np.asarray(model.order, dtype=np.int32)
            return order[np.arange(start, start + REALIZATION_BLOCK) % order.size]
        rng = stream_generator(self.seed, ENVIRONMENT_STREAM, index)
        size = len(model.alphabet)
        if model.kind == EnvironmentKind.iid:
            return rng.choice(size, size=REALIZATION_BLOCK, p=np.asarray(model.weights)).astype(np.int32)
        cum = np.cumsum(np.asarray(model.matrix), axis=1)
        cum[:, -1] = 1.0
        uniforms = rng.random(REALIZATION_BLOCK + 1)
        state = self._markov_state
        if state is None:
            start_cum = np.cumsum(model.stationary)
            start_cum[-1] = 1.0
            state = int(np.searchsorted(start_cum, uniforms[-1], side="right"))
            block = [state]
            draws = uniforms[:REALIZATION_BLOCK - 1]
        else:
            block = []
            draws = uniforms[:REALIZATION_BLOCK]
        for u in draws:
            state = int(np.searchsorted(cum[state], u, side="right"))
            block.append(state)
        self._markov_state = state
        return np.asarray(block, dtype=np.int32)


class Environment:
    """
    One realization xi = (xi_1, xi_2, ...) viewed from a shift offset.

    law(k) is the law of X_k for k >= 1; shifting never copies the realization.
    """

    def __init__(self, realization: _Realization, offset: int = 0):
        self._realization = realization
        self.offset = int(offset)

    @property
    def model(self) -> EnvironmentModel:
        return self._realization.model

    @property
    def seed(self) -> int:
        return self._realization.seed

    def letters(self, start: int, count: int) -> np.ndarray:
        """Alphabet indices of letters start .. start + count - 1 (1-based)."""
        if start < 1:
            raise ValueError("letters are indexed from 1")
        first = self.offset + start - 1
        return self._realization.ensure(first + count)[first:first + count]

    def letter(self, k: int) -> int:
        return int(self.letters(k, 1)[0])

    def law(self, k: int) -> StepLaw:
        return self.model.alphabet[self.letter(k)]

    def shift(self, n: int) -> "Environment":
        if n < 0:
            raise ValueError("shift count must be nonnegative")
        return Environment(self._realization, self.offset + n)

    def materialize(self, horizon: int) -> "Environment":
        """Realize letters 1..horizon of this view before handing it to workers."""
        self._realization.ensure(self.offset + horizon)
        return self

    def __repr__(self) -> str:
        return f"Environment(kind={self.model.kind.value}, seed={self.seed}, offset={self.offset})"


def realize(model: EnvironmentModel, seed: int) -> Environment:
    """Seeded realization with offset 0."""
    return Environment(_Realization(model, seed))


def shift(env: Environment, n: int) -> Environment:
    """theta^n xi as a view sharing the realization."""
    return env.shift(n)


def step_law(env: Environment, n: int) -> StepLaw:
    """Law of X_n under P_xi for this (possibly shifted) environment."""
    if n < 1:
        raise ValueError("step index must be >= 1")
    return env.law(n)


def letter_frequencies(env: Environment, count: int) -> np.ndarray:
    """Empirical frequency of each alphabet letter among letters 1..count."""
    letters = env.letters(1, count)
    return np.bincount(letters, minlength=len(env.model.alphabet)) / count


def transition_frequencies(env: Environment, count: int) -> np.ndarray:
    """Row-normalized empirical transition counts among letters 1..count."""
    letters = env.letters(1, count)
    size = len(env.model.alphabet)
    counts = np.zeros((size, size))
    np.add.at(counts, (letters[:-1], letters[1:]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
