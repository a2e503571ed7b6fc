"""
Core data structures for random walks in time-random environments.
Step laws, environment models, paths, DP state, harmonic estimates and reports.
"""

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from rwre_toolkit.errors import TableMiss

PROB_TOLERANCE = 1e-12
# float sums of lattice steps that hit 0 exactly may land a few ulps off
ZERO_SLACK = 1e-9


def parse_number(value: Any) -> float:
    """Accept floats, ints and fraction strings such as "1/3"."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


# ----- Environment -----

class EnvironmentKind(str, Enum):
    iid = "iid-alphabet"
    markov = "markov-alphabet"
    periodic = "periodic"


class StepLaw(BaseModel):
    """A finitely supported law on the reals; atoms are kept sorted by value."""

    model_config = ConfigDict(frozen=True)

    values: Tuple[float, ...]
    probs: Tuple[float, ...]
    name: str = ""

    @model_validator(mode="before")
    @classmethod
    def parse_and_sort(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "values" not in data or "probs" not in data:
            return data
        values = [parse_number(v) for v in data["values"]]
        probs = [parse_number(p) for p in data["probs"]]
        if len(values) != len(probs):
            raise ValueError("values and probs must have the same length")
        pairs = sorted(zip(values, probs))
        return {
            **data,
            "values": tuple(v for v, _ in pairs),
            "probs": tuple(p for _, p in pairs),
        }

    @field_validator("probs")
    @classmethod
    def validate_probs(cls, v):
        if not v:
            raise ValueError("a step law needs at least one atom")
        if any(p <= 0.0 or p > 1.0 for p in v):
            raise ValueError("atom probabilities must lie in (0, 1]")
        if abs(sum(v) - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"atom probabilities sum to {sum(v)!r}, not 1")
        return v

    @field_validator("values")
    @classmethod
    def validate_values(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("atom values must be distinct")
        return v

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def moment(self, order: int) -> float:
        return float(np.dot(np.power(self.values, order), self.probs))

    def abs_moment(self, order: float) -> float:
        return float(np.dot(np.abs(self.values) ** order, self.probs))

    @property
    def second_moment(self) -> float:
        return self.moment(2)

    @property
    def min_value(self) -> float:
        return self.values[0]

    @property
    def max_value(self) -> float:
        return self.values[-1]

    @property
    def has_positive_atom(self) -> bool:
        return self.max_value > 0.0

    def atoms(self) -> List[Tuple[float, float]]:
        return list(zip(self.values, self.probs))

    def label(self) -> str:
        return self.name or "{" + ", ".join(f"({v:g}, {p:.6g})" for v, p in self.atoms()) + "}"


class ModelSpec(BaseModel):
    """Human-editable model description, as read from an experiment config."""

    kind: EnvironmentKind
    alphabet: List[StepLaw] = Field(default_factory=list)
    weights: Optional[List[float]] = None
    matrix: Optional[List[List[float]]] = None
    order: Optional[List[int]] = None
    lattice_unit: Optional[float] = Field(default=None, gt=0.0)

    @field_validator("weights", mode="before")
    @classmethod
    def parse_weights(cls, v):
        if v is None:
            return v
        return [parse_number(w) for w in v]

    @field_validator("matrix", mode="before")
    @classmethod
    def parse_matrix(cls, v):
        if v is None:
            return v
        return [[parse_number(w) for w in row] for row in v]


class EnvironmentModel(BaseModel):
    """A validated stationary-ergodic generator of step laws."""

    model_config = ConfigDict(frozen=True)

    kind: EnvironmentKind
    alphabet: Tuple[StepLaw, ...]
    weights: Optional[Tuple[float, ...]] = None
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    order: Optional[Tuple[int, ...]] = None
    stationary: Tuple[float, ...]
    sigma2: float
    lattice_unit: Optional[float] = None

    @property
    def is_lattice(self) -> bool:
        return self.lattice_unit is not None

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    def annealed_abs_moment(self, order: float) -> float:
        return float(sum(w * law.abs_moment(order) for w, law in zip(self.stationary, self.alphabet)))


class AssumptionCheck(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class AssumptionReport(BaseModel):
    checks: List[AssumptionCheck]
    sigma2: float
    epsilon: float = 1.0
    annealed_moment: float = Field(description="annealed E|X_1|^(2+epsilon)")
    ergodic: bool

    @computed_field
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]


# ----- Walks -----

class Path(BaseModel):
    """A walk trajectory started at offset y; S_0 = 0."""

    y: float = Field(ge=0.0)
    steps: Tuple[float, ...]
    tau: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def validate_tau(self):
        if self.tau is None:
            return self
        if self.tau > len(self.steps):
            raise ValueError("tau beyond the path horizon")
        positions = self.positions()
        if positions[self.tau] > ZERO_SLACK or np.any(positions[1:self.tau] <= 0.0):
            raise ValueError("tau is not the first passage into (-inf, 0]")
        return self

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def partial_sums(self) -> np.ndarray:
        """S_0..S_N with S_0 = 0."""
        return np.concatenate(([0.0], np.cumsum(self.steps)))

    def positions(self) -> np.ndarray:
        """y + S_0 .. y + S_N."""
        return self.y + self.partial_sums()


class FirstPassageSample(BaseModel):
    """Outcome of a first-passage simulation, censored at n_max."""

    tau: Optional[int] = Field(default=None, ge=1)
    n_max: int = Field(ge=1)
    terminal: float

    @property
    def censored(self) -> bool:
        return self.tau is None

    @model_validator(mode="after")
    def validate_terminal(self):
        if self.tau is None and self.terminal <= 0.0:
            raise ValueError("censored samples carry a surviving value > 0")
        if self.tau is not None and self.terminal > 0.0:
            raise ValueError("uncensored samples end at or below 0")
        return self


class RescaledPath(BaseModel):
    """Values of the rescaled path on the grid k/N."""

    N: int
    values: Tuple[float, ...]

    def at(self, t: float) -> float:
        """Linear interpolation between grid times."""
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        return float(np.interp(t * self.N, np.arange(self.N + 1), self.values))


@dataclass
class LatticeDistribution:
    """
    Sub-probability law of the killed walk at time `time`.

    alive[i] is the mass at position i * unit (index 0 only carries mass at
    time 0 when the walk starts from y = 0). killed maps nonpositive lattice
    indices to the mass absorbed there so far.
    """
    time: int
    unit: float
    alive: np.ndarray
    killed: Dict[int, float] = field(default_factory=dict)
    pruned_mass: float = 0.0

    @property
    def alive_mass(self) -> float:
        return float(self.alive.sum())

    @property
    def killed_mass(self) -> float:
        return float(sum(self.killed.values()))

    @property
    def total_mass(self) -> float:
        return self.alive_mass + self.killed_mass

    def first_moment(self) -> float:
        """E(y + S_n; tau > n)."""
        return float(self.unit * np.dot(np.arange(self.alive.size), self.alive))

    def alive_map(self) -> Dict[float, float]:
        idx = np.flatnonzero(self.alive)
        return {float(i * self.unit): float(self.alive[i]) for i in idx}

    def killed_map(self) -> Dict[float, float]:
        return {float(k * self.unit): m for k, m in sorted(self.killed.items()) if m > 0.0}


@dataclass
class LatticeLaw:
    """A probability law on lattice indices (positions are index * unit)."""
    unit: float
    positions: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        keep = self.probs > 0.0
        self.positions = np.asarray(self.positions)[keep].astype(np.int64)
        self.probs = np.asarray(self.probs)[keep] / np.asarray(self.probs)[keep].sum()

    @property
    def span(self) -> int:
        """gcd of the gaps between support points (1 for a single point)."""
        if self.positions.size < 2:
            return 1
        return int(np.gcd.reduce(np.diff(self.positions)))

    def mean(self) -> float:
        return float(self.unit * np.dot(self.positions, self.probs))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw lattice indices."""
        cum = np.cumsum(self.probs)
        cum[-1] = 1.0
        return self.positions[np.searchsorted(cum, rng.random(size), side="right")]


@dataclass
class PathEnsemble:
    """A batch of equal-length paths; positions[i, k] = y + S_k of sample i."""
    y: float
    positions: np.ndarray
    method: str
    proposals: Optional[int] = None

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1] - 1

    def endpoints(self) -> np.ndarray:
        return self.positions[:, -1]

    def path(self, i: int) -> Path:
        return Path(y=self.y, steps=tuple(np.diff(self.positions[i])))


# ----- Harmonic function -----

class HarmonicMethod(str, Enum):
    dp = "dp-finite-horizon"
    mc = "mc-stopping"


class HarmonicEstimate(BaseModel):
    y: float
    value: float = Field(ge=0.0)
    std_error: float = Field(default=0.0, ge=0.0)
    n_samples: int = 0
    censored: int = 0
    method: HarmonicMethod
    flagged: bool = False
    horizon: Optional[int] = None
    truncation: float = Field(default=0.0, ge=0.0, description="|U_H - U_{H/2}|, dp only")
    gap_bound: Optional[float] = None


@dataclass
class UTable:
    """
    Finite-horizon harmonic values U_{T-n}(theta^n xi, z * unit).

    entries[n, z] for shifts n = 0..N and lattice indices z = 0..z_max. All
    rows share the terminal time T = N + horizon, so row n uses horizon T - n
    and rows satisfy the one-step harmonic identity exactly.
    """
    N: int
    horizon: int
    unit: float
    entries: np.ndarray
    model_hash: str = ""
    seed: int = 0

    @property
    def terminal(self) -> int:
        return self.N + self.horizon

    @property
    def z_max(self) -> int:
        return self.entries.shape[1] - 1

    def grid(self) -> np.ndarray:
        return np.arange(self.z_max + 1) * self.unit

    def row(self, n: int) -> np.ndarray:
        if not 0 <= n <= self.N:
            raise TableMiss(f"shift {n} outside table range 0..{self.N}")
        return self.entries[n]

    def value(self, n: int, y: float) -> float:
        """Entry at (n, y); off-lattice y is linearly interpolated."""
        row = self.row(n)
        z = y / self.unit
        if z < 0 or z > self.z_max:
            raise TableMiss(f"position {y} outside table range 0..{self.z_max * self.unit}")
        return float(np.interp(z, np.arange(self.z_max + 1), row))


class ConditionedKernel(BaseModel):
    """One-step law of the h-transformed walk from (time, source)."""

    time: int
    source: float
    destinations: Tuple[float, ...]
    probs: Tuple[float, ...]
    normalizer: float
    table_value: float

    @model_validator(mode="after")
    def validate_kernel(self):
        if abs(sum(self.probs) - 1.0) > 1e-10:
            raise ValueError("kernel probabilities do not sum to 1")
        if any(d <= 0.0 for d in self.destinations):
            raise ValueError("kernel destinations must be positive")
        return self


class RejectionResult(BaseModel):
    path: Path
    proposals: int


# ----- Reports -----

class GoFTest(str, Enum):
    ks = "ks"
    chi_square = "chi-square"


class GoFReport(BaseModel):
    test: GoFTest
    statistic: float = Field(ge=0.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n_samples: int
    target: str
    seed: Optional[int] = None
    model_hash: Optional[str] = None


class RatioRow(BaseModel):
    n: int
    exact: float
    predicted: float
    ratio: float = Field(gt=0.0)


class AsymptoticRatioReport(BaseModel):
    rows: List[RatioRow]
    band: float
    passed: bool

    @field_validator("rows")
    @classmethod
    def validate_rows(cls, v):
        ns = [r.n for r in v]
        if ns != sorted(ns) or len(set(ns)) != len(ns):
            raise ValueError("rows must be strictly increasing in n")
        return v

    @property
    def final_ratio(self) -> float:
        return self.rows[-1].ratio


class ProfilePoint(BaseModel):
    n: int
    value: float


class ConvergenceProfile(BaseModel):
    y: float
    points: List[ProfilePoint]
    monotone: bool


class LimitCheck(BaseModel):
    """Residual of the one-step harmonic identity for estimated U values."""
    y: float
    residual: float
    std_error: float
    truncation: float
    passed: bool


class MartingaleReport(BaseModel):
    y: float
    N: int
    target: float
    values: Dict[int, float]
    max_deviation: float
    passed: bool


class SlopeReport(BaseModel):
    points: List[Tuple[float, float, float]] = Field(description="(y, U, U/y)")
    lower_bound_holds: bool
    final_ratio: float
    band: float
    passed: bool


class FKGReport(BaseModel):
    y: float
    n: int
    worst_slack: float
    worst_x: float
    passed: bool


class LemmaBoundRow(BaseModel):
    n: int
    survival: float
    bound: float
    holds: bool


class LemmaBoundReport(BaseModel):
    y: float
    rows: List[LemmaBoundRow]
    first_n: Optional[int]
    passed: bool


class SlopeShiftReport(BaseModel):
    points: List[Tuple[int, float, float, float]] = Field(description="(n, y_n, U, U/y_n)")
    lower_bound_holds: bool
    final_ratio: float
    band: float
    passed: bool


class PrefixStabilityReport(BaseModel):
    N: int
    prefix: int
    n_samples: int
    tv_distance: float
    passed: bool


class OracleReport(BaseModel):
    x: float
    t: float
    n_samples: int
    max_cdf_discrepancy: float
    passed: bool
