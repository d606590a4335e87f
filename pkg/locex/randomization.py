"""
Locex Local Randomization Tests

Randomization tests of the null hypothesis that observations are locally
exchangeable with respect to a given premetric. The randomization group is
the set of permutations that map every block of a BlockPartition onto
itself; the exceedance fraction of the observed statistic is penalized by
the expected premetric mass moved by a random group element before it is
compared with 1 - alpha.

Features:
    - Closed-form penalty and exact group maximum for block groups
    - Greedy agglomerative design of the partition under a block constraint
    - Exact enumeration test for small groups
    - Subsampled test with the alpha_N correction and seeded, chunked draws
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from locex.errors import BudgetExceededError, EstimationError, InsufficientSamplesError, PartitionError
from locex.local_empirical import ObservationSet
from locex.premetric import BlockPartition, CovariatesLike, Premetric, as_table, premetric_hash
from locex.streams import PERMUTATIONS, chunk_plan, derive_rng, parallel_map, stream_id

logger = logging.getLogger(__name__)

DIFF_CONDITIONAL_PROPORTIONS = 'diff-conditional-proportions'
USER_SUPPLIED = 'user-supplied'

DEFAULT_ENUMERATION_BUDGET = 10 ** 6
DEFAULT_CHUNK_SIZE = 1024


# =============================================================================
# Test statistics
# =============================================================================
def diff_conditional_proportions(group_flags: Sequence[bool], outcome_flags: Sequence[bool]) -> float:
    """
    Difference of outcome rates between the flagged group and the rest.

    Args:
        group_flags: True for treated records
        outcome_flags: True for records with the outcome of interest

    Returns:
        #(outcome & treated) / #treated - #(outcome & control) / #control
    """
    group = np.asarray(group_flags, dtype=bool)
    outcome = np.asarray(outcome_flags, dtype=bool)
    if group.shape != outcome.shape:
        raise ValueError("group and outcome flags differ in length")
    n_treated = int(group.sum())
    n_control = group.size - n_treated
    if n_treated == 0 or n_control == 0:
        raise EstimationError("both groups need at least one record")
    return (np.count_nonzero(outcome & group) / n_treated
            - np.count_nonzero(outcome & ~group) / n_control)


@dataclass(frozen=True)
class TestStatisticSpec:
    """
    Test statistic S evaluated on a (permuted) vector of observation values.
    Covariates, and anything attached to them such as group flags, stay
    fixed while values move.
    """

    __test__ = False

    kind: str
    func: Callable[[np.ndarray], float]
    batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    description: str = ''

    def __call__(self, values: np.ndarray) -> float:
        return float(self.func(values))

    def evaluate_batch(self, values: np.ndarray) -> np.ndarray:
        """Statistic for each row of a (draws, n) array of permuted values."""
        if self.batch is not None:
            return np.asarray(self.batch(values), dtype=float)
        return np.array([self(row) for row in values], dtype=float)

    @classmethod
    def user_supplied(cls, func: Callable[[np.ndarray], float],
                      batch: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                      description: str = '') -> 'TestStatisticSpec':
        return cls(USER_SUPPLIED, func, batch, description)

    @classmethod
    def diff_conditional_proportions(cls, group_flags: Sequence[bool],
                                     outcome_values: Sequence[Any]) -> 'TestStatisticSpec':
        """
        Built-in statistic: outcome rate among treated minus among control.

        Args:
            group_flags: Per-index treatment flags, fixed under permutation
            outcome_values: Observation values counted as the outcome
        """
        group = np.asarray(group_flags, dtype=bool)
        if group.all() or not group.any():
            raise EstimationError("both groups need at least one record")
        outcomes = list(outcome_values)
        n_treated = int(group.sum())
        n_control = group.size - n_treated

        def batch(values: np.ndarray) -> np.ndarray:
            flags = np.isin(values, outcomes)
            return (np.count_nonzero(flags[:, group], axis=1) / n_treated
                    - np.count_nonzero(flags[:, ~group], axis=1) / n_control)

        def single(values: np.ndarray) -> float:
            return float(batch(np.asarray(values)[np.newaxis, :])[0])

        return cls(DIFF_CONDITIONAL_PROPORTIONS, single, batch,
                   f"P(outcome in {outcomes} | treated) - P(outcome | control)")


# =============================================================================
# Block constraints
# =============================================================================
class BlockConstraint:
    """Predicate deciding whether a set of indices may form one block."""

    def admits(self, block: Sequence[int]) -> bool:
        raise NotImplementedError

    def merge_mask(self, blocks: Sequence[Sequence[int]], k: int) -> np.ndarray:
        """Admissibility of merging blocks[k] with each block."""
        return np.array([self.admits(list(blocks[k]) + list(other)) for other in blocks])

    def admissible_matrix(self, blocks: Sequence[Sequence[int]]) -> np.ndarray:
        """Admissibility of every pairwise merge."""
        return np.array([self.merge_mask(blocks, k) for k in range(len(blocks))]).reshape(len(blocks), len(blocks))

    def __call__(self, block: Sequence[int]) -> bool:
        return self.admits(block)


class NoConstraint(BlockConstraint):
    def admits(self, block: Sequence[int]) -> bool:
        return True

    def merge_mask(self, blocks: Sequence[Sequence[int]], k: int) -> np.ndarray:
        return np.ones(len(blocks), dtype=bool)

    def admissible_matrix(self, blocks: Sequence[Sequence[int]]) -> np.ndarray:
        return np.ones((len(blocks), len(blocks)), dtype=bool)


class PredicateConstraint(BlockConstraint):
    """Wraps an arbitrary callable on index blocks."""

    def __init__(self, predicate: Callable[[Sequence[int]], bool]):
        self.predicate = predicate

    def admits(self, block: Sequence[int]) -> bool:
        return bool(self.predicate(block))


class LabelCountConstraint(BlockConstraint):
    """
    Caps on how many indices with each label a block may hold, and
    optionally on block size.

    Args:
        labels: Per-index labels (None when only the size cap is used)
        caps: Maximum count per label; labels without a cap are unlimited
        max_size: Maximum block size
    """

    def __init__(self, labels: Optional[Sequence[Any]] = None,
                 caps: Optional[Dict[Any, int]] = None, max_size: Optional[int] = None):
        self.labels = list(labels) if labels is not None else None
        self.caps = dict(caps or {})
        self.max_size = max_size

    def _counts(self, block: Sequence[int]) -> np.ndarray:
        counts = [len(block)]
        if self.labels is not None:
            for label in self.caps:
                counts.append(sum(1 for i in block if self.labels[i] == label))
        return np.array(counts)

    def _limits(self) -> np.ndarray:
        limits = [self.max_size if self.max_size is not None else np.inf]
        if self.labels is not None:
            limits.extend(self.caps.values())
        return np.array(limits, dtype=float)

    def admits(self, block: Sequence[int]) -> bool:
        return bool(np.all(self._counts(block) <= self._limits()))

    def merge_mask(self, blocks: Sequence[Sequence[int]], k: int) -> np.ndarray:
        counts = np.array([self._counts(b) for b in blocks])
        return np.all(counts + counts[k] <= self._limits(), axis=1)

    def admissible_matrix(self, blocks: Sequence[Sequence[int]]) -> np.ndarray:
        counts = np.array([self._counts(b) for b in blocks])
        return np.all(counts[:, None, :] + counts[None, :, :] <= self._limits(), axis=2)


class AllOf(BlockConstraint):
    """Conjunction of constraints."""

    def __init__(self, *constraints: BlockConstraint):
        self.constraints = constraints

    def admits(self, block: Sequence[int]) -> bool:
        return all(c.admits(block) for c in self.constraints)

    def merge_mask(self, blocks: Sequence[Sequence[int]], k: int) -> np.ndarray:
        mask = np.ones(len(blocks), dtype=bool)
        for constraint in self.constraints:
            mask &= constraint.merge_mask(blocks, k)
        return mask

    def admissible_matrix(self, blocks: Sequence[Sequence[int]]) -> np.ndarray:
        matrix = np.ones((len(blocks), len(blocks)), dtype=bool)
        for constraint in self.constraints:
            matrix &= constraint.admissible_matrix(blocks)
        return matrix


def no_constraint() -> BlockConstraint:
    return NoConstraint()


def matched_pair_constraint(group_flags: Sequence[bool]) -> BlockConstraint:
    """At most one treated and at most one control index per block."""
    return LabelCountConstraint([bool(f) for f in group_flags], caps={True: 1, False: 1})


def max_block_size(size: int) -> BlockConstraint:
    if size < 1:
        raise ValueError(f"maximum block size must be positive, got {size}")
    return LabelCountConstraint(max_size=size)


def all_of(*constraints: BlockConstraint) -> BlockConstraint:
    return AllOf(*constraints)


ConstraintLike = Union[BlockConstraint, Callable[[Sequence[int]], bool], None]


def _as_constraint(constraint: ConstraintLike) -> BlockConstraint:
    if constraint is None:
        return NoConstraint()
    if isinstance(constraint, BlockConstraint):
        return constraint
    return PredicateConstraint(constraint)


# =============================================================================
# Closed forms over the block group
# =============================================================================
def _check_partition(partition: BlockPartition, n: int) -> None:
    if partition.n_items != n:
        raise PartitionError(f"partition covers {partition.n_items} indices but there are {n} covariates")


def _block_distances(partition: BlockPartition, premetric: Premetric,
                     covariates: CovariatesLike) -> List[np.ndarray]:
    table = as_table(covariates)
    _check_partition(partition, len(table))
    return [premetric.pairwise(table.subset(block)) if len(block) > 1 else np.zeros((1, 1))
            for block in partition.blocks]


def penalty(partition: BlockPartition, premetric: Premetric, covariates: CovariatesLike) -> float:
    """
    Group-average premetric mass moved by a uniform within-block permutation,
    sum_k (1/|T_k|) sum_{t, t' in T_k} d(t, t').
    """
    blocks = _block_distances(partition, premetric, covariates)
    return math.fsum(float(d.sum()) / d.shape[0] for d in blocks)


def group_max(partition: BlockPartition, premetric: Premetric, covariates: CovariatesLike) -> float:
    """
    M = 1 v max over the block group of sum_t d(t, pi(t)).

    The maximum factorizes over blocks and each block term is a linear
    assignment problem, solved exactly.
    """
    total = []
    for d in _block_distances(partition, premetric, covariates):
        if d.shape[0] > 1:
            rows, cols = linear_sum_assignment(d, maximize=True)
            total.append(float(d[rows, cols].sum()))
    return max(1.0, math.fsum(total))


def group_max_bound(partition: BlockPartition, premetric: Premetric, covariates: CovariatesLike) -> float:
    """Upper bound 1 v sum_k sum_{t in T_k} max_{t' in T_k} d(t, t') on group_max."""
    blocks = _block_distances(partition, premetric, covariates)
    return max(1.0, math.fsum(float(d.max(axis=1).sum()) for d in blocks))


def alpha_n(alpha: float, m: float, n_samples: int) -> float:
    """
    Corrected level alpha - 2 sqrt(|log x| / x) with x = 2N / M^2.
    May be <= 0. The value is only a valid level for x >= e; below that the
    subsampled test refuses to run (see required_samples).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    if n_samples < 1:
        raise ValueError(f"N must be >= 1, got {n_samples}")
    x = 2.0 * n_samples / (m * m)
    return alpha - 2.0 * math.sqrt(abs(math.log(x)) / x)


def required_samples(alpha: float, m: float) -> int:
    """
    Smallest N with alpha_N > 0 on the tail 2N / M^2 >= e, where alpha_N
    increases with N.
    """
    lo = max(1, math.ceil(math.e * m * m / 2.0))
    if alpha_n(alpha, m, lo) > 0:
        return lo
    hi = lo * 2
    while alpha_n(alpha, m, hi) <= 0:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if alpha_n(alpha, m, mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi


# =============================================================================
# Partition design
# =============================================================================
def build_partition(covariates: CovariatesLike, premetric: Premetric, alpha: float,
                    constraint: ConstraintLike = None) -> BlockPartition:
    """
    Greedily merge blocks while the group penalty stays within alpha / 2.

    Starting from singletons, every step merges the admissible pair of blocks
    whose merge gives the smallest penalty for the whole partition; ties go
    to the lexicographically smallest pair of block positions. Blocks are
    kept ordered by their smallest index.

    Args:
        covariates: Covariates of the observations
        premetric: Premetric over covariates
        alpha: Type-1 error level in (0, 1)
        constraint: Block admissibility predicate; must admit singletons

    Returns:
        BlockPartition with penalty <= alpha / 2
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    table = as_table(covariates)
    n = len(table)
    if n == 0:
        raise ValueError("cannot build a partition of no covariates")
    constraint = _as_constraint(constraint)
    for i in range(n):
        if not constraint.admits([i]):
            raise ValueError(f"constraint rejects the singleton block [{i}]")

    limit = alpha / 2.0
    blocks: List[List[int]] = [[i] for i in range(n)]
    cross = premetric.pairwise(table).astype(float)
    within = np.zeros(n)
    sizes = np.ones(n)
    admissible = constraint.admissible_matrix(blocks)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    current = 0.0

    while len(blocks) > 1:
        contribution = within / sizes
        merged = (within[:, None] + within[None, :] + 2.0 * cross) / (sizes[:, None] + sizes[None, :])
        cost = current - contribution[:, None] - contribution[None, :] + merged
        size = len(blocks)
        cost[~(admissible & upper[:size, :size])] = np.inf
        flat = int(np.argmin(cost))
        k, k2 = divmod(flat, len(blocks))
        best = cost[k, k2]
        if not np.isfinite(best) or best > limit:
            break

        blocks[k] = sorted(blocks[k] + blocks[k2])
        del blocks[k2]
        within[k] += within[k2] + 2.0 * cross[k, k2]
        sizes[k] += sizes[k2]
        cross[k, :] += cross[k2, :]
        cross[:, k] += cross[:, k2]
        within = np.delete(within, k2)
        sizes = np.delete(sizes, k2)
        cross = np.delete(np.delete(cross, k2, axis=0), k2, axis=1)
        admissible = np.delete(np.delete(admissible, k2, axis=0), k2, axis=1)
        mask = constraint.merge_mask(blocks, k)
        admissible[k, :] = mask
        admissible[:, k] = mask
        current = math.fsum(within / sizes)

    partition = BlockPartition(tuple(tuple(b) for b in blocks))
    logger.info(
        f"Built partition with {len(blocks)} blocks ({partition.matched_pairs()} pairs) "
        f"and penalty {current:.6g} <= {limit:.6g}"
    )
    return partition


# =============================================================================
# Permutation sampling
# =============================================================================
class PermutationSampler:
    """
    Draws uniform within-block permutations and their premetric costs.

    Each draw orders every block by independent uniform keys, which gives a
    uniform permutation of the block.

    Args:
        partition: Block partition defining the group
        block_distances: Optional per-block distance matrices for cost lookups
    """

    def __init__(self, partition: BlockPartition, block_distances: Optional[List[np.ndarray]] = None):
        self.partition = partition
        self.n = partition.n_items
        self.block_ids = partition.block_ids()
        self.base = np.lexsort((np.arange(self.n), self.block_ids))
        self.block_distances = block_distances
        if block_distances is not None:
            self._flat = np.concatenate([d.ravel() for d in block_distances])
            offsets = np.cumsum([0] + [d.size for d in block_distances[:-1]])
            self._local = np.empty(self.n, dtype=np.int64)
            self._row = np.empty(self.n, dtype=np.int64)
            for k, block in enumerate(partition.blocks):
                size = len(block)
                for position, index in enumerate(block):
                    self._local[index] = position
                    self._row[index] = offsets[k] + position * size

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, n) array of permutations; row r maps index t to perms[r, t]."""
        keys = rng.random((count, self.n))
        order = np.lexsort((keys, np.broadcast_to(self.block_ids, (count, self.n))), axis=-1)
        perms = np.empty_like(order)
        perms[:, self.base] = order
        return perms

    def costs(self, perms: np.ndarray) -> np.ndarray:
        """sum_t d(t, pi(t)) for each drawn permutation."""
        if self.block_distances is None:
            raise ValueError("sampler was built without block distances")
        return self._flat[self._row[np.newaxis, :] + self._local[perms]].sum(axis=1)


def sample_within_bin_permutation(partition: BlockPartition, rng: np.random.Generator) -> np.ndarray:
    """One uniform permutation that maps each block onto itself."""
    return PermutationSampler(partition).draw(rng, 1)[0]


# =============================================================================
# Tests
# =============================================================================
@dataclass
class TestResult:
    """Outcome of a local randomization test."""

    __test__ = False

    statistic: float
    frac_exceed: float
    penalty: float
    threshold: float
    reject: bool
    n_samples: Union[int, str]
    alpha: float
    alpha_n: Optional[float] = None
    seed: Optional[int] = None
    group_max: Optional[float] = None
    partition: Optional[BlockPartition] = None
    premetric_hash: str = ''
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        record = {
            'statistic': self.statistic,
            'frac_exceed': self.frac_exceed,
            'penalty': self.penalty,
            'threshold': self.threshold,
            'reject': self.reject,
            'n_samples': self.n_samples,
            'alpha': self.alpha,
            'alpha_n': self.alpha_n,
            'seed': self.seed,
            'M': self.group_max,
            'premetric_hash': self.premetric_hash,
        }
        if self.partition is not None:
            record['partition'] = self.partition.to_record()
            record['matched_pairs'] = self.partition.matched_pairs()
        record.update(self.extra)
        return record


def _enumerate_group(partition: BlockPartition):
    n = partition.n_items
    moving = [block for block in partition.blocks if len(block) > 1]
    for choice in itertools.product(*(itertools.permutations(block) for block in moving)):
        perm = np.arange(n)
        for block, image in zip(moving, choice):
            perm[list(block)] = image
        yield perm


def exact_test(data: ObservationSet, partition: BlockPartition, premetric: Premetric,
               statistic: TestStatisticSpec, alpha: float,
               budget: int = DEFAULT_ENUMERATION_BUDGET, chunk_size: int = DEFAULT_CHUNK_SIZE) -> TestResult:
    """
    Exact local randomization test by enumerating the whole block group.

    Rejects iff (1/|G|) sum_pi 1[S(X) > S(X_pi)] - penalty > 1 - alpha.

    Args:
        data: Observations; values are permuted, covariates stay fixed
        partition: Block partition defining the group
        premetric: Premetric under the null hypothesis
        statistic: Test statistic
        alpha: Type-1 error level in (0, 1)
        budget: Largest group order that may be enumerated

    Returns:
        TestResult with n_samples = 'exact'
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    _check_partition(partition, len(data))
    order = partition.group_order()
    if order > budget:
        raise BudgetExceededError(order, budget)

    observed = statistic(data.values)
    exceed = 0
    permutations = _enumerate_group(partition)
    while True:
        chunk = list(itertools.islice(permutations, chunk_size))
        if not chunk:
            break
        stats = statistic.evaluate_batch(data.values[np.array(chunk)])
        exceed += int(np.count_nonzero(observed > stats))

    frac_exceed = exceed / order
    group_penalty = penalty(partition, premetric, data.table)
    threshold = 1.0 - alpha
    reject = frac_exceed - group_penalty > threshold
    logger.info(
        f"Exact test over {order} permutations: exceed fraction {frac_exceed:.6g}, "
        f"penalty {group_penalty:.6g}, reject={reject}"
    )
    return TestResult(
        statistic=observed, frac_exceed=frac_exceed, penalty=group_penalty, threshold=threshold,
        reject=reject, n_samples='exact', alpha=alpha, partition=partition,
        premetric_hash=premetric_hash(premetric), extra={'group_order': order},
    )


def subsampled_test(data: ObservationSet, partition: BlockPartition, premetric: Premetric,
                    statistic: TestStatisticSpec, alpha: float, n_samples: int, seed: int,
                    chunk_size: int = DEFAULT_CHUNK_SIZE, workers: Optional[int] = None) -> TestResult:
    """
    Local randomization test on N uniform draws from the block group.

    Rejects iff (1/N) sum_n (1[S(X) > S(X_pi_n)] - sum_t d(t, pi_n(t))) > 1 - alpha_N.
    Draws come in chunks, chunk c using the seed stream (seed, permutations, c),
    so the result does not depend on the worker count.

    Args:
        data: Observations; values are permuted, covariates stay fixed
        partition: Block partition defining the group
        premetric: Premetric under the null hypothesis
        statistic: Test statistic
        alpha: Type-1 error level in (0, 1)
        n_samples: Number of permutations N
        seed: Master seed
        chunk_size: Draws per seed stream
        workers: Thread count for the chunk axis

    Returns:
        TestResult recording seed, N and alpha_N
    """
    _check_partition(partition, len(data))
    blocks = _block_distances(partition, premetric, data.table)
    m = group_max(partition, premetric, data.table)
    level = alpha_n(alpha, m, n_samples)
    # alpha_N only bounds the Monte Carlo error once 2N / M^2 >= e
    required = required_samples(alpha, m)
    if n_samples < required:
        raise InsufficientSamplesError(level, n_samples, required)

    observed = statistic(data.values)
    sampler = PermutationSampler(partition, blocks)
    permutation_stream = stream_id(PERMUTATIONS)

    def run_chunk(piece: Tuple[int, int]) -> Tuple[int, np.ndarray]:
        index, count = piece
        perms = sampler.draw(derive_rng(seed, permutation_stream, index), count)
        stats = statistic.evaluate_batch(data.values[perms])
        return int(np.count_nonzero(observed > stats)), sampler.costs(perms)

    results = parallel_map(run_chunk, chunk_plan(n_samples, chunk_size), workers)
    exceed = sum(r[0] for r in results)
    mean_penalty = math.fsum(np.concatenate([r[1] for r in results])) / n_samples
    frac_exceed = exceed / n_samples
    threshold = 1.0 - level
    reject = frac_exceed - mean_penalty > threshold
    logger.info(
        f"Subsampled test with N={n_samples}, seed={seed}: exceed fraction {frac_exceed:.6g}, "
        f"penalty {mean_penalty:.6g}, alpha_N {level:.6g}, reject={reject}"
    )
    return TestResult(
        statistic=observed, frac_exceed=frac_exceed, penalty=mean_penalty, threshold=threshold,
        reject=reject, n_samples=n_samples, alpha=alpha, alpha_n=level, seed=seed, group_max=m,
        partition=partition, premetric_hash=premetric_hash(premetric),
    )
