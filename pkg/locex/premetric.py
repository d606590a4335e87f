"""
Locex Premetric Module

Defines covariates, premetrics over covariates and the block partitions used
by randomization tests, together with the quantities derived from them
(block diameters and the sufficiency defect of binned empirical measures).

A premetric is a symmetric function d: T x T -> [0, 1] with d(t, t) = 0. The
declarative family supported here is

    d(s, t) = 1                                  if a hard categorical column differs
    d(s, t) = min(1, sum_i weight_i * dist_i(s, t))  otherwise

where dist_i is |s_i - t_i| or, for a column with period p,
min(|s_i - t_i| mod p, p - |s_i - t_i| mod p). A TablePremetric accepts an
explicit pairwise table for small covariate sets.

Usage:
    from locex.premetric import PremetricSpec, NumericTerm

    spec = PremetricSpec(numeric=(NumericTerm('hour', 0.1, period=24.0),))
    spec.evaluate(spec.make_covariate(numeric=[23]), spec.make_covariate(numeric=[1]))
"""

import hashlib
import io
import logging
import math
from configparser import ConfigParser
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from locex.errors import PartitionError, PremetricError, SchemaError

logger = logging.getLogger(__name__)

SECTION_PREFIX = 'premetric:'
TRUE_STRINGS = ('1', 'true', 'yes', 'on')


@dataclass(frozen=True)
class Covariate:
    """
    Covariate of one observation: categorical labels followed by numeric
    coordinates. Duplicate covariates are allowed and stand for replicate
    observations at the same point.
    """

    categorical: Tuple[str, ...] = ()
    numeric: Tuple[float, ...] = ()

    def to_record(self, spec: Optional['PremetricSpec'] = None) -> Dict[str, Any]:
        """Column-name keyed record when a spec is given, positional otherwise."""
        if spec is None:
            return {'categorical': list(self.categorical), 'numeric': list(self.numeric)}
        record: Dict[str, Any] = {}
        for term, value in zip(spec.categorical, self.categorical):
            record[term.column] = value
        for term, value in zip(spec.numeric, self.numeric):
            record[term.column] = value
        return record


@dataclass(frozen=True)
class CategoricalTerm:
    """Categorical column; with hard_mismatch, differing labels give distance 1."""

    column: str
    hard_mismatch: bool = True


@dataclass(frozen=True)
class NumericTerm:
    """Numeric column with weight lambda >= 0 and an optional period."""

    column: str
    weight: float
    period: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.weight, (int, float)) or isinstance(self.weight, bool):
            raise PremetricError(f"weight for column '{self.column}' must be a real number")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise PremetricError(
                f"weight for column '{self.column}' must be finite and >= 0, got {self.weight}"
            )
        if self.period is not None and (not math.isfinite(self.period) or self.period <= 0):
            raise PremetricError(
                f"period for column '{self.column}' must be finite and > 0, got {self.period}"
            )
        object.__setattr__(self, 'weight', float(self.weight))
        if self.period is not None:
            object.__setattr__(self, 'period', float(self.period))

    @property
    def cyclic(self) -> bool:
        return self.period is not None

    def distance(self, a: float, b: float) -> float:
        """Absolute or cyclic distance between two coordinate values."""
        delta = abs(a - b)
        if self.period is None:
            return delta
        delta = delta % self.period
        return min(delta, self.period - delta)

    def distances(self, column: np.ndarray, value: float) -> np.ndarray:
        """Vectorized distance; elementwise identical to distance()."""
        delta = np.abs(column - value)
        if self.period is None:
            return delta
        delta = np.mod(delta, self.period)
        return np.minimum(delta, self.period - delta)

    def reduce(self, value: float) -> float:
        """Reduce a cyclic coordinate into [0, period)."""
        if self.period is None:
            return value
        reduced = value % self.period
        # value % p can round up to p for tiny negative values
        return 0.0 if reduced >= self.period else reduced


class CovariateTable:
    """
    Column-stacked view of a covariate sequence for vectorized evaluation.

    Args:
        covariates: Covariates sharing one schema
    """

    def __init__(self, covariates: Sequence[Covariate]):
        self.covariates: Tuple[Covariate, ...] = tuple(covariates)
        n = len(self.covariates)
        n_cat = len(self.covariates[0].categorical) if n else 0
        n_num = len(self.covariates[0].numeric) if n else 0
        for i, c in enumerate(self.covariates):
            if len(c.categorical) != n_cat or len(c.numeric) != n_num:
                raise SchemaError(f"covariate {i} has a different arity from covariate 0")
        self.categorical = np.empty((n, n_cat), dtype=object)
        for i, c in enumerate(self.covariates):
            self.categorical[i, :] = c.categorical
        self.numeric = np.array([c.numeric for c in self.covariates], dtype=float).reshape(n, n_num)

    def __len__(self) -> int:
        return len(self.covariates)

    def __getitem__(self, index: int) -> Covariate:
        return self.covariates[index]

    def subset(self, indices: Iterable[int]) -> 'CovariateTable':
        return CovariateTable([self.covariates[i] for i in indices])


CovariatesLike = Union[CovariateTable, Sequence[Covariate]]


def as_table(covariates: CovariatesLike) -> CovariateTable:
    """Wrap a covariate sequence in a CovariateTable unless it already is one."""
    if isinstance(covariates, CovariateTable):
        return covariates
    return CovariateTable(covariates)


@dataclass(frozen=True)
class PremetricSpec:
    """
    Declarative premetric: hard categorical mismatches plus a weighted sum of
    absolute or cyclic numeric distances, capped at 1.
    """

    categorical: Tuple[CategoricalTerm, ...] = ()
    numeric: Tuple[NumericTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'categorical', tuple(self.categorical))
        object.__setattr__(self, 'numeric', tuple(self.numeric))
        names = self.columns
        if len(set(names)) != len(names):
            raise PremetricError(f"duplicate column names in premetric: {names}")

    @property
    def columns(self) -> List[str]:
        return [t.column for t in self.categorical] + [t.column for t in self.numeric]

    def check_covariate(self, covariate: Covariate) -> None:
        """Raise SchemaError unless the covariate conforms to this spec."""
        if not isinstance(covariate, Covariate):
            raise SchemaError(f"expected a Covariate, got {type(covariate).__name__}")
        if len(covariate.categorical) != len(self.categorical):
            raise SchemaError(
                f"expected {len(self.categorical)} categorical coordinates, "
                f"got {len(covariate.categorical)}"
            )
        if len(covariate.numeric) != len(self.numeric):
            raise SchemaError(
                f"expected {len(self.numeric)} numeric coordinates, got {len(covariate.numeric)}"
            )
        for term, value in zip(self.categorical, covariate.categorical):
            if not isinstance(value, str):
                raise SchemaError(f"column '{term.column}' expects a label string, got {value!r}")
        for term, value in zip(self.numeric, covariate.numeric):
            if isinstance(value, (bool, str)) or not isinstance(value, (int, float, np.floating, np.integer)):
                raise SchemaError(f"column '{term.column}' expects a real number, got {value!r}")
            if not math.isfinite(value):
                raise SchemaError(f"column '{term.column}' has a non-finite value {value!r}")

    def make_covariate(self, categorical: Sequence[Any] = (), numeric: Sequence[float] = ()) -> Covariate:
        """Build a conforming covariate, reducing cyclic coordinates mod their period."""
        numeric = [float(v) for v in numeric]
        if len(numeric) != len(self.numeric):
            raise SchemaError(f"expected {len(self.numeric)} numeric coordinates, got {len(numeric)}")
        covariate = Covariate(
            categorical=tuple(str(v) for v in categorical),
            numeric=tuple(term.reduce(v) for term, v in zip(self.numeric, numeric)),
        )
        self.check_covariate(covariate)
        return covariate

    def covariate_from_mapping(self, values: Mapping[str, Any]) -> Covariate:
        """Build a covariate from a column-name keyed mapping."""
        missing = [c for c in self.columns if c not in values]
        if missing:
            raise SchemaError(f"missing covariate columns: {', '.join(missing)}")
        try:
            numeric = [float(values[t.column]) for t in self.numeric]
        except (TypeError, ValueError) as e:
            raise SchemaError(f"numeric covariate value could not be parsed: {e}") from e
        return self.make_covariate([values[t.column] for t in self.categorical], numeric)

    def evaluate(self, s: Covariate, t: Covariate) -> float:
        """
        Premetric value d(s, t).

        Args:
            s: First covariate
            t: Second covariate

        Returns:
            Distance in [0, 1]
        """
        self.check_covariate(s)
        self.check_covariate(t)
        for term, a, b in zip(self.categorical, s.categorical, t.categorical):
            if term.hard_mismatch and a != b:
                return 1.0
        total = 0.0
        for term, a, b in zip(self.numeric, s.numeric, t.numeric):
            total += term.weight * term.distance(a, b)
        return min(1.0, total)

    def distances_to(self, covariates: CovariatesLike, tau: Covariate) -> np.ndarray:
        """Vector of d(t, tau) over a covariate table."""
        self.check_covariate(tau)
        table = as_table(covariates)
        if len(table) and (table.categorical.shape[1] != len(self.categorical)
                           or table.numeric.shape[1] != len(self.numeric)):
            raise SchemaError("covariate table does not conform to the premetric schema")
        total = np.zeros(len(table))
        for i, term in enumerate(self.numeric):
            total += term.weight * term.distances(table.numeric[:, i], tau.numeric[i])
        total = np.minimum(1.0, total)
        for i, term in enumerate(self.categorical):
            if term.hard_mismatch:
                total[table.categorical[:, i] != tau.categorical[i]] = 1.0
        return total

    def pairwise(self, covariates: CovariatesLike) -> np.ndarray:
        """Matrix of d(s, t) over all pairs of a covariate table."""
        table = as_table(covariates)
        return np.array([self.distances_to(table, tau) for tau in table.covariates]).reshape(
            len(table), len(table)
        )

    def scaled(self, factor: float) -> 'PremetricSpec':
        """Copy with every numeric weight multiplied by ``factor``."""
        return PremetricSpec(
            categorical=self.categorical,
            numeric=tuple(NumericTerm(t.column, t.weight * factor, t.period) for t in self.numeric),
        )

    def to_config(self, config: Optional[ConfigParser] = None) -> ConfigParser:
        """Write one [premetric:<column>] section per column into a ConfigParser."""
        config = config if config is not None else ConfigParser()
        for term in self.categorical:
            section = SECTION_PREFIX + term.column
            config[section] = {
                'kind': 'categorical',
                'hard_mismatch': 'true' if term.hard_mismatch else 'false',
            }
        for term in self.numeric:
            section = SECTION_PREFIX + term.column
            config[section] = {'kind': 'numeric', 'weight': repr(term.weight)}
            if term.period is not None:
                config.set(section, 'period', repr(term.period))
        return config

    def to_text(self) -> str:
        """Canonical INI text of this spec."""
        buffer = io.StringIO()
        self.to_config().write(buffer)
        return buffer.getvalue()

    @classmethod
    def from_config(cls, config: ConfigParser) -> 'PremetricSpec':
        """
        Read a spec from the [premetric:<column>] sections of a ConfigParser.

        Args:
            config: Parsed configuration

        Returns:
            PremetricSpec with columns in section order
        """
        categorical = []
        numeric = []
        for section in config.sections():
            if not section.startswith(SECTION_PREFIX):
                continue
            column = section[len(SECTION_PREFIX):]
            kind = config.get(section, 'kind', fallback='numeric').strip().lower()
            if kind == 'categorical':
                hard = config.get(section, 'hard_mismatch', fallback='true').strip().lower()
                categorical.append(CategoricalTerm(column, hard in TRUE_STRINGS))
            elif kind == 'numeric':
                try:
                    weight = config.getfloat(section, 'weight', fallback=0.0)
                    period = config.getfloat(section, 'period', fallback=None)
                except ValueError as e:
                    raise PremetricError(f"section [{section}]: {e}") from e
                numeric.append(NumericTerm(column, weight, period))
            else:
                raise PremetricError(f"section [{section}]: unknown kind '{kind}'")
        if not categorical and not numeric:
            logger.warning("No [premetric:*] sections found; using the zero premetric")
        return cls(categorical=tuple(categorical), numeric=tuple(numeric))

    @classmethod
    def from_text(cls, text: str) -> 'PremetricSpec':
        config = ConfigParser()
        config.read_string(text)
        return cls.from_config(config)


class TablePremetric:
    """
    Premetric given by an explicit table over a small list of covariates.

    No axioms are checked at construction; use validate_premetric() to
    audit a hand-written table.

    Args:
        covariates: Distinct covariates indexing the table rows and columns
        table: Square matrix of distances
    """

    def __init__(self, covariates: Sequence[Covariate], table: Sequence[Sequence[float]]):
        self.covariates = tuple(covariates)
        self.table = np.asarray(table, dtype=float)
        if self.table.shape != (len(self.covariates), len(self.covariates)):
            raise PremetricError(
                f"table shape {self.table.shape} does not match {len(self.covariates)} covariates"
            )
        self._index = {c: i for i, c in enumerate(self.covariates)}
        if len(self._index) != len(self.covariates):
            raise PremetricError("table covariates must be distinct")

    def _lookup(self, covariate: Covariate) -> int:
        try:
            return self._index[covariate]
        except KeyError:
            raise SchemaError(f"covariate {covariate} is not in the premetric table") from None

    def evaluate(self, s: Covariate, t: Covariate) -> float:
        return float(self.table[self._lookup(s), self._lookup(t)])

    def distances_to(self, covariates: CovariatesLike, tau: Covariate) -> np.ndarray:
        table = as_table(covariates)
        column = self._lookup(tau)
        return np.array([self.table[self._lookup(c), column] for c in table.covariates])

    def pairwise(self, covariates: CovariatesLike) -> np.ndarray:
        rows = [self._lookup(c) for c in as_table(covariates).covariates]
        return self.table[np.ix_(rows, rows)]

    def to_text(self) -> str:
        return repr((self.covariates, self.table.tolist()))


Premetric = Union[PremetricSpec, TablePremetric]


def premetric_hash(premetric: Premetric) -> str:
    """sha256 of the canonical text of a premetric, for result provenance."""
    return hashlib.sha256(premetric.to_text().encode('utf-8')).hexdigest()


@dataclass
class Violation:
    """One failed premetric axiom on a sampled pair."""

    kind: str
    i: int
    j: int
    detail: str


@dataclass
class ValidationReport:
    """Outcome of checking the premetric axioms on a covariate sample."""

    n_pairs: int
    violations: List[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_record(self) -> Dict[str, Any]:
        return {
            'passed': self.passed,
            'n_pairs': self.n_pairs,
            'violations': [
                {'kind': v.kind, 'i': v.i, 'j': v.j, 'detail': v.detail} for v in self.violations
            ],
        }


def validate_premetric(premetric: Premetric, sample: Sequence[Covariate],
                       tolerance: float = 0.0) -> ValidationReport:
    """
    Check symmetry, zero self-distance and range [0, 1] on all sampled pairs.

    Args:
        premetric: Premetric to audit
        sample: Nonempty covariate sample
        tolerance: Allowed absolute slack in each check

    Returns:
        ValidationReport listing every violation found
    """
    sample = list(sample)
    if not sample:
        raise ValueError("validation sample must be nonempty")

    report = ValidationReport(n_pairs=0)
    for i in range(len(sample)):
        for j in range(i, len(sample)):
            report.n_pairs += 1
            try:
                forward = premetric.evaluate(sample[i], sample[j])
                backward = premetric.evaluate(sample[j], sample[i])
            except SchemaError as e:
                report.violations.append(Violation('evaluation', i, j, str(e)))
                continue
            if i == j and abs(forward) > tolerance:
                report.violations.append(Violation('self_distance', i, j, f"d(t, t) = {forward!r}"))
            if abs(forward - backward) > tolerance:
                report.violations.append(
                    Violation('symmetry', i, j, f"d(s, t) = {forward!r} but d(t, s) = {backward!r}")
                )
            for value in (forward, backward):
                if not (-tolerance <= value <= 1.0 + tolerance):
                    report.violations.append(Violation('range', i, j, f"value {value!r} outside [0, 1]"))
                    break

    if report.passed:
        logger.info(f"Premetric passed validation on {report.n_pairs} pairs")
    else:
        logger.warning(f"Premetric failed validation with {len(report.violations)} violations")
    return report


@dataclass(frozen=True)
class BlockPartition:
    """
    Partition of observation indices 0..n-1 into disjoint nonempty blocks.
    The within-block permutation group is the product of the symmetric
    groups on the blocks.
    """

    blocks: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in block) for block in self.blocks)
        object.__setattr__(self, 'blocks', blocks)
        seen = set()
        total = 0
        for k, block in enumerate(blocks):
            if not block:
                raise PartitionError(f"block {k} is empty")
            for i in block:
                if i in seen:
                    raise PartitionError(f"index {i} appears in more than one block")
                seen.add(i)
            total += len(block)
        if seen != set(range(total)):
            raise PartitionError("blocks do not cover the index set 0..n-1")

    @classmethod
    def singletons(cls, n: int) -> 'BlockPartition':
        return cls(tuple((i,) for i in range(n)))

    @classmethod
    def from_labels(cls, labels: Sequence[Any]) -> 'BlockPartition':
        """One block per distinct label, blocks ordered by first appearance."""
        groups: Dict[Any, List[int]] = {}
        for i, label in enumerate(labels):
            groups.setdefault(label, []).append(i)
        return cls(tuple(tuple(g) for g in groups.values()))

    @property
    def n_items(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def sizes(self) -> List[int]:
        return [len(b) for b in self.blocks]

    def group_order(self) -> int:
        """Number of within-block permutations, prod_k |T_k|!."""
        return math.prod(math.factorial(len(b)) for b in self.blocks)

    def matched_pairs(self) -> int:
        """Number of blocks of size two."""
        return sum(1 for b in self.blocks if len(b) == 2)

    def block_ids(self) -> np.ndarray:
        """Array mapping each index to its block number."""
        ids = np.empty(self.n_items, dtype=np.int64)
        for k, block in enumerate(self.blocks):
            ids[list(block)] = k
        return ids

    def relabel(self, mapping: Sequence[int]) -> 'BlockPartition':
        """Partition of the relabeled index set, index i becoming mapping[i]."""
        return BlockPartition(tuple(tuple(mapping[i] for i in block) for block in self.blocks))

    def to_record(self) -> List[List[int]]:
        return [list(b) for b in self.blocks]


def diameter(premetric: Premetric, block: CovariatesLike) -> float:
    """
    Diameter of a block, the largest premetric value over its pairs.

    Args:
        premetric: Premetric to evaluate
        block: Nonempty set of covariates

    Returns:
        Diameter in [0, 1]; 0 for a singleton
    """
    table = as_table(block)
    if len(table) == 0:
        raise ValueError("diameter of an empty block is undefined")
    if len(table) == 1:
        return 0.0
    return float(premetric.pairwise(table).max())


@dataclass(frozen=True)
class SufficiencyDefect:
    """Bounds on how far binned empirical measures are from sufficiency."""

    total: float
    coarse: float
    diameters: Tuple[float, ...]

    def to_record(self) -> Dict[str, Any]:
        return {'total': self.total, 'coarse': self.coarse, 'diameters': list(self.diameters)}


def sufficiency_defect_bound(premetric: Premetric, partition: BlockPartition,
                             covariates: CovariatesLike) -> SufficiencyDefect:
    """
    Sum over blocks of |T_k| * diam(T_k), and the coarser |T| * max_k diam(T_k).

    Args:
        premetric: Premetric to evaluate
        partition: Partition of the covariate indices
        covariates: Covariates indexed by the partition

    Returns:
        SufficiencyDefect with both bounds and the per-block diameters
    """
    table = as_table(covariates)
    if partition.n_items != len(table):
        raise PartitionError(
            f"partition covers {partition.n_items} indices but there are {len(table)} covariates"
        )
    diameters = tuple(diameter(premetric, table.subset(block)) for block in partition.blocks)
    total = math.fsum(len(block) * diam for block, diam in zip(partition.blocks, diameters))
    coarse = len(table) * max(diameters) if diameters else 0.0
    return SufficiencyDefect(total=total, coarse=coarse, diameters=diameters)


def approximate_sufficiency_bound(premetric: Premetric, partition: BlockPartition,
                                  covariates: CovariatesLike, h_sup: float = 1.0) -> float:
    """
    Bound 4 * sup|h| * sum_k |T_k| diam(T_k) on the expected gap between
    conditioning on the binned empirical measures with and without G.
    """
    if h_sup < 0:
        raise ValueError(f"h_sup must be >= 0, got {h_sup}")
    return 4.0 * h_sup * sufficiency_defect_bound(premetric, partition, covariates).total
