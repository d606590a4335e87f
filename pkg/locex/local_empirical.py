"""
Locex Local Empirical Measure Module

Estimates the latent measure G_tau at a query covariate tau from locally
exchangeable observations. Each observation X_t gets a weight xi_t chosen to
minimize the expected squared error bound

    1/4 * sum_t xi_t^2 + sum_t xi_t * b_t

over the probability simplex, where b_t bounds the bias of using X_t in place
of an observation at tau. The minimizer is the Euclidean projection of -2b
onto the simplex and has a closed form after sorting b, so a query costs
O(|T| log |T|).

Usage:
    from locex.local_empirical import ObservationSet, TestFunctionSpec, local_empirical_measure

    h = TestFunctionSpec.indicator_of(['severe'])
    measure = local_empirical_measure(data, tau, premetric, h)
    estimate(measure, h)
"""

import logging
import math
from configparser import ConfigParser
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

from locex.errors import EstimationError, SchemaError
from locex.premetric import Covariate, CovariateTable, Premetric, PremetricSpec
from locex.streams import parallel_map

logger = logging.getLogger(__name__)

INDICATOR = 'indicator'
GENERAL = 'general'

TAIL_GRID_POINTS = 101
TAIL_GRID_MARGIN = 1e-9
RADIUS_TOLERANCE = 1e-6
WEIGHT_SUM_TOLERANCE = 1e-12


def _as_value_array(values: Sequence[Any]) -> np.ndarray:
    array = np.asarray(values)
    if array.ndim != 1:
        array = np.empty(len(values), dtype=object)
        for i, value in enumerate(values):
            array[i] = value
    return array


class ObservationSet:
    """
    Observations X_t paired with their covariates t.

    Args:
        covariates: One covariate per observation
        values: Observation values, opaque except through test functions
        labels: Optional per-observation auxiliary columns (e.g. group flags)
    """

    def __init__(self, covariates: Sequence[Covariate], values: Sequence[Any],
                 labels: Optional[Mapping[str, Sequence[Any]]] = None):
        if len(covariates) != len(values):
            raise SchemaError(f"{len(covariates)} covariates but {len(values)} values")
        self.table = covariates if isinstance(covariates, CovariateTable) else CovariateTable(covariates)
        self.values = _as_value_array(values)
        self.labels: Dict[str, np.ndarray] = {}
        for name, column in (labels or {}).items():
            if len(column) != len(values):
                raise SchemaError(f"label column '{name}' has {len(column)} entries, expected {len(values)}")
            self.labels[name] = np.asarray(column)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def covariates(self) -> Sequence[Covariate]:
        return self.table.covariates

    def take(self, indices: Sequence[int]) -> 'ObservationSet':
        """Observations at the given indices, in that order."""
        indices = list(indices)
        return ObservationSet(
            [self.table.covariates[i] for i in indices],
            self.values[indices],
            {name: column[indices] for name, column in self.labels.items()},
        )


@dataclass(frozen=True)
class TestFunctionSpec:
    """
    Bounded test function h: X -> [0, 1].

    ``kind`` selects the bias coefficient rule: indicators of sets admit
    b = d, general bounded maps use b = 2 sqrt(d).
    """

    __test__ = False

    kind: str
    func: Callable[[Any], float]
    description: str = ''

    def __post_init__(self):
        if self.kind not in (INDICATOR, GENERAL):
            raise ValueError(f"test function kind must be '{INDICATOR}' or '{GENERAL}', got '{self.kind}'")

    def __call__(self, value: Any) -> float:
        result = float(self.func(value))
        if not 0.0 <= result <= 1.0:
            raise EstimationError(f"test function {self.description or self.kind} returned {result} outside [0, 1]")
        return result

    def evaluate_many(self, values: Iterable[Any]) -> np.ndarray:
        return np.array([self(v) for v in values], dtype=float)

    @classmethod
    def indicator_of(cls, members: Iterable[Any]) -> 'TestFunctionSpec':
        """Indicator of a finite set of observation values."""
        members = frozenset(members)
        return cls(INDICATOR, lambda x: 1.0 if x in members else 0.0,
                   f"1[x in {{{', '.join(sorted(map(str, members)))}}}]")

    @classmethod
    def indicator_interval(cls, lower: float = -math.inf, upper: float = math.inf) -> 'TestFunctionSpec':
        """Indicator of the closed interval [lower, upper] for numeric observations."""
        return cls(INDICATOR, lambda x: 1.0 if lower <= float(x) <= upper else 0.0,
                   f"1[{lower} <= x <= {upper}]")

    @classmethod
    def linear(cls, lower: float, upper: float) -> 'TestFunctionSpec':
        """General map (x - lower) / (upper - lower) clipped to [0, 1]."""
        if not upper > lower:
            raise ValueError(f"upper must exceed lower, got [{lower}, {upper}]")
        span = upper - lower
        return cls(GENERAL, lambda x: min(1.0, max(0.0, (float(x) - lower) / span)),
                   f"clip((x - {lower}) / {span})")

    @classmethod
    def from_config(cls, config: ConfigParser, section: str = 'test_function') -> 'TestFunctionSpec':
        """
        Read a test function from an INI section.

        ``kind = indicator`` with ``values = a, b`` (or ``lower``/``upper``)
        gives an indicator; ``kind = general`` with ``lower``/``upper`` gives
        the clipped linear map.
        """
        if not config.has_section(section):
            raise ValueError(f"configuration has no [{section}] section")
        kind = config.get(section, 'kind', fallback=INDICATOR).strip().lower()
        if kind == INDICATOR:
            values = config.get(section, 'values', fallback=None)
            if values is not None:
                return cls.indicator_of(v.strip() for v in values.split(',') if v.strip())
            return cls.indicator_interval(config.getfloat(section, 'lower', fallback=-math.inf),
                                          config.getfloat(section, 'upper', fallback=math.inf))
        if kind == GENERAL:
            return cls.linear(config.getfloat(section, 'lower'), config.getfloat(section, 'upper'))
        raise ValueError(f"[{section}]: unknown test function kind '{kind}'")


KindLike = Union[TestFunctionSpec, str]


def _kind_of(h: KindLike) -> str:
    kind = h.kind if isinstance(h, TestFunctionSpec) else str(h)
    if kind not in (INDICATOR, GENERAL):
        raise ValueError(f"unknown test function kind '{kind}'")
    return kind


def b_coefficient(h: KindLike, distance: float) -> float:
    """
    Bias coefficient for one observation at premetric distance ``distance``.

    Args:
        h: Test function (or its kind)
        distance: Premetric value d(t, tau) in [0, 1]

    Returns:
        distance for indicators, 2 * sqrt(distance) for general maps
    """
    if not 0.0 <= distance <= 1.0:
        raise ValueError(f"distance must lie in [0, 1], got {distance}")
    if _kind_of(h) == INDICATOR:
        return float(distance)
    return 2.0 * math.sqrt(distance)


def b_coefficients(h: KindLike, distances: np.ndarray) -> np.ndarray:
    """Vectorized b_coefficient."""
    distances = np.asarray(distances, dtype=float)
    if distances.size and (distances.min() < 0.0 or distances.max() > 1.0):
        raise ValueError("distances must lie in [0, 1]")
    if _kind_of(h) == INDICATOR:
        return distances.copy()
    return 2.0 * np.sqrt(distances)


class OptimalWeights(NamedTuple):
    """Simplex weights minimizing the squared error bound."""

    active_count: int
    weights: np.ndarray
    order: np.ndarray


def optimal_weights(b: Sequence[float]) -> OptimalWeights:
    """
    Minimize 1/4 xi'xi + xi'b over the probability simplex.

    Sorts b ascending (stable, so ties keep input order), keeps the largest
    prefix J with (1 + 2 sum_{i<=J} b_i) / J > 2 b_J, and gives each kept
    observation the weight (1 + 2 sum_{i<=M} b_i) / M - 2 b_j.

    Args:
        b: Nonnegative finite bias coefficients

    Returns:
        OptimalWeights(active_count M, weights in input order, sorting permutation)
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("b must be a nonempty vector")
    if not np.all(np.isfinite(b)) or np.any(b < 0):
        raise ValueError("b must be finite and nonnegative")

    order = np.argsort(b, kind='stable')
    sorted_b = b[order]
    level = (1.0 + 2.0 * np.cumsum(sorted_b)) / np.arange(1, b.size + 1)
    margin = level - 2.0 * sorted_b
    active = int(np.flatnonzero(margin > 0)[-1]) + 1

    # cumsum drifts on long vectors; recompute the kept level exactly.
    # The last kept weight is the smallest; drop it if rounding left it <= 0.
    while True:
        kept = sorted_b[:active]
        active_weights = (1.0 + 2.0 * math.fsum(kept)) / active - 2.0 * kept
        active_weights += (1.0 - math.fsum(active_weights)) / active
        if active == 1 or active_weights[-1] > 0:
            break
        active -= 1
    weights = np.zeros(b.size)
    weights[order[:active]] = active_weights
    return OptimalWeights(active, weights, order)


@dataclass
class LocalEmpiricalMeasure:
    """Weighted atoms (xi_t, X_t) standing in for G at the query covariate."""

    query: Covariate
    weights: np.ndarray
    values: np.ndarray
    b: np.ndarray
    active_count: int
    order: np.ndarray

    def __post_init__(self):
        if abs(math.fsum(self.weights) - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise EstimationError(f"weights sum to {math.fsum(self.weights)!r}, not 1")
        if np.any(self.weights < 0):
            raise EstimationError("weights must be nonnegative")

    @property
    def atoms(self) -> List[tuple]:
        """All (weight, value) pairs in ascending-b order."""
        return [(float(self.weights[i]), self.values[i]) for i in self.order]

    def active_atoms(self) -> List[tuple]:
        return self.atoms[:self.active_count]

    def to_record(self, premetric: Optional[PremetricSpec] = None) -> Dict[str, Any]:
        return {
            'tau': self.query.to_record(premetric),
            'M': self.active_count,
            'atoms': [{'weight': w, 'value': _plain(v)} for w, v in self.active_atoms()],
            'sq_bound': squared_error_bound(self.weights, self.b),
        }


def _plain(value: Any) -> Any:
    return value.item() if isinstance(value, np.generic) else value


def local_empirical_measure(data: ObservationSet, tau: Covariate, premetric: Premetric,
                            h: KindLike) -> LocalEmpiricalMeasure:
    """
    Build the optimally weighted local empirical measure at ``tau``.

    Args:
        data: Nonempty observations
        tau: Query covariate
        premetric: Premetric over covariates
        h: Test function (or its kind) selecting the bias coefficient rule

    Returns:
        LocalEmpiricalMeasure over all observations, zero weights included
    """
    if len(data) == 0:
        raise EstimationError("cannot build a local empirical measure from no observations")
    b = b_coefficients(h, premetric.distances_to(data.table, tau))
    solution = optimal_weights(b)
    return LocalEmpiricalMeasure(
        query=tau,
        weights=solution.weights,
        values=data.values,
        b=b,
        active_count=solution.active_count,
        order=solution.order,
    )


def estimate(measure: LocalEmpiricalMeasure, h: TestFunctionSpec) -> float:
    """
    Estimate G_tau(h) by the weighted average of h over the atoms.

    The same number is the local empirical approximation of the posterior
    predictive expectation E[h(X_tau) | X_T]; that reading is only covered
    by the error bounds for tau outside the observed covariates.
    """
    active = np.flatnonzero(measure.weights > 0)
    value = math.fsum(measure.weights[active] * h.evaluate_many(measure.values[active]))
    return min(1.0, max(0.0, value))


def _check_pair(weights: Sequence[float], b: Sequence[float]) -> tuple:
    weights = np.asarray(weights, dtype=float)
    b = np.asarray(b, dtype=float)
    if weights.shape != b.shape:
        raise ValueError(f"weights and b differ in shape: {weights.shape} vs {b.shape}")
    return weights, b


def squared_error_bound(weights: Sequence[float], b: Sequence[float]) -> float:
    """Bound 1/4 sum xi^2 + sum xi b on the expected squared estimation error."""
    weights, b = _check_pair(weights, b)
    return math.fsum(np.concatenate([0.25 * weights * weights, weights * b]))


def _tail_bound_from_moments(sum_sq: float, bias: float, delta: float) -> float:
    def infimand(u: float) -> float:
        eps = delta * u
        value = 2.0 * math.exp(-2.0 * eps * eps / sum_sq)
        if bias > 0:
            value += bias / (delta - eps)
        return value

    grid = TAIL_GRID_MARGIN + np.arange(TAIL_GRID_POINTS) * (1.0 - 2.0 * TAIL_GRID_MARGIN) / (TAIL_GRID_POINTS - 1)
    values = [infimand(u) for u in grid]
    best_index = int(np.argmin(values))
    best = values[best_index]

    if bias > 0:
        lo = grid[max(0, best_index - 1)]
        hi = grid[min(len(grid) - 1, best_index + 1)]
        refined = minimize_scalar(infimand, bounds=(lo, hi), method='bounded', options={'xatol': 1e-12})
        if refined.success and refined.fun < best:
            best = float(refined.fun)

    return min(1.0, max(0.0, best))


def tail_bound(weights: Sequence[float], b: Sequence[float], delta: float) -> float:
    """
    Bound on P(|estimate - G_tau(h)| > delta).

    The infimum over eps in (0, delta) of
    2 exp(-2 eps^2 / sum xi^2) + sum xi b / (delta - eps) is taken over a
    fixed 101-point grid, refined near the best grid point; every candidate
    is itself a valid bound.

    Args:
        weights: Simplex weights
        b: Bias coefficients
        delta: Deviation, > 0

    Returns:
        Probability bound clamped to [0, 1]
    """
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    weights, b = _check_pair(weights, b)
    sum_sq = math.fsum(weights * weights)
    bias = math.fsum(weights * b)
    return _tail_bound_from_moments(sum_sq, bias, delta)


def confidence_radius(weights: Sequence[float], b: Sequence[float], alpha: float) -> float:
    """
    Smallest delta (to 1e-6) with tail_bound(weights, b, delta) <= alpha.

    Returns math.inf when no delta <= 1 attains level alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    weights, b = _check_pair(weights, b)
    sum_sq = math.fsum(weights * weights)
    bias = math.fsum(weights * b)

    if _tail_bound_from_moments(sum_sq, bias, 1.0) > alpha:
        return math.inf
    lo, hi = 0.0, 1.0
    while hi - lo > RADIUS_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if _tail_bound_from_moments(sum_sq, bias, mid) <= alpha:
            hi = mid
        else:
            lo = mid
    return hi


def estimate_curve(data: ObservationSet, queries: Sequence[Covariate], premetric: Premetric,
                   h: TestFunctionSpec, alpha: float = 0.05, delta: float = 0.1,
                   include_atoms: bool = False, workers: Optional[int] = None) -> List[Dict[str, Any]]:
    """
    Estimates and error bounds at each query covariate.

    Args:
        data: Observations
        queries: Query covariates
        premetric: Premetric over covariates
        h: Test function
        alpha: Level for the confidence radius
        delta: Deviation for the tail bound
        include_atoms: Attach the active atoms to every record
        workers: Thread count for the query axis

    Returns:
        One record per query, in query order
    """
    spec = premetric if isinstance(premetric, PremetricSpec) else None

    def run_query(tau: Covariate) -> Dict[str, Any]:
        measure = local_empirical_measure(data, tau, premetric, h)
        record = {
            'tau': tau.to_record(spec),
            'estimate': estimate(measure, h),
            'M': measure.active_count,
            'sq_bound': squared_error_bound(measure.weights, measure.b),
            'tail_bound': tail_bound(measure.weights, measure.b, delta),
            'delta': delta,
            'ci': confidence_radius(measure.weights, measure.b, alpha),
            'alpha': alpha,
        }
        if include_atoms:
            record['atoms'] = measure.to_record(spec)['atoms']
        return record

    records = parallel_map(run_query, queries, workers)
    logger.info(f"Estimated G(h) at {len(records)} query covariates from {len(data)} observations")
    return records
