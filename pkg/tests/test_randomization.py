"""
Unit tests for the local randomization test module.
"""

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from locex.errors import BudgetExceededError, EstimationError, InsufficientSamplesError, PartitionError
from locex.local_empirical import ObservationSet
from locex.premetric import BlockPartition, Covariate, NumericTerm, PremetricSpec, TablePremetric
from locex.randomization import (
    PermutationSampler,
    TestStatisticSpec,
    all_of,
    alpha_n,
    build_partition,
    diff_conditional_proportions,
    exact_test,
    group_max,
    group_max_bound,
    matched_pair_constraint,
    max_block_size,
    penalty,
    required_samples,
    sample_within_bin_permutation,
    subsampled_test,
)


@pytest.fixture
def line_spec():
    """Unit-weight premetric on one numeric column."""
    return PremetricSpec(numeric=(NumericTerm('x', 1.0),))


@pytest.fixture
def zero_spec():
    """Zero premetric on one numeric column."""
    return PremetricSpec(numeric=(NumericTerm('x', 0.0),))


def points(*values):
    return [Covariate(numeric=(float(v),)) for v in values]


def table_premetric(matrix):
    covariates = points(*range(len(matrix)))
    return TablePremetric(covariates, matrix), covariates


def enumerate_costs(partition, premetric, covariates):
    d = premetric.pairwise(covariates)
    costs = []
    moving = [b for b in partition.blocks if len(b) > 1]
    for choice in itertools.product(*(itertools.permutations(b) for b in moving)):
        cost = 0.0
        for block, image in zip(moving, choice):
            cost += sum(d[t, s] for t, s in zip(block, image))
        costs.append(cost)
    return costs


@pytest.fixture
def paired_data():
    """Eight observations in four treated/control pairs at the same covariate."""
    rng = np.random.default_rng(21)
    covariates = points(0, 0, 1, 1, 2, 2, 3, 3)
    values = rng.choice(['severe', 'mild'], size=8)
    flags = [True, False] * 4
    return ObservationSet(covariates, values, {'group': flags}), flags


class TestStatistics:
    """Test cases for the built-in test statistic."""

    def test_all_treated_severe(self):
        """Test that a perfect split gives 1."""
        assert diff_conditional_proportions([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0

    def test_equal_rates(self):
        """Test that identical rates give 0."""
        assert diff_conditional_proportions([1, 1, 0, 0], [1, 0, 1, 0]) == 0.0

    def test_hand_case(self):
        """Test 3/4 treated severe against 1/4 control severe."""
        group = [1, 1, 1, 1, 0, 0, 0, 0]
        outcome = [1, 1, 1, 0, 1, 0, 0, 0]
        assert diff_conditional_proportions(group, outcome) == 0.5

    def test_empty_group(self):
        """Test that an empty group is rejected."""
        with pytest.raises(EstimationError):
            diff_conditional_proportions([1, 1], [0, 1])

    def test_batch_matches_scalar(self):
        """Test that the batch evaluator equals row-by-row evaluation."""
        rng = np.random.default_rng(4)
        flags = rng.random(12) < 0.5
        flags[:2] = [True, False]
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        values = rng.choice(['severe', 'mild'], size=(50, 12))
        batch = stat.evaluate_batch(values)
        assert list(batch) == [stat(row) for row in values]
        assert stat(values[0]) == diff_conditional_proportions(flags, values[0] == 'severe')

    def test_user_supplied_without_batch(self):
        """Test that a user statistic without a batch form is looped."""
        stat = TestStatisticSpec.user_supplied(lambda v: float(np.sum(v)))
        assert list(stat.evaluate_batch(np.array([[1, 2], [3, 4]]))) == [3.0, 7.0]


class TestClosedForms:
    """Test cases for the penalty and the group maximum."""

    def test_singletons(self, line_spec):
        """Test that the trivial group has penalty 0 and M = 1."""
        covariates = points(0, 0.4, 0.9)
        partition = BlockPartition.singletons(3)
        assert penalty(partition, line_spec, covariates) == 0.0
        assert group_max(partition, line_spec, covariates) == 1.0

    def test_pair(self, line_spec):
        """Test one pair at distance 0.3."""
        covariates = points(0, 0.3)
        partition = BlockPartition(((0, 1),))
        assert penalty(partition, line_spec, covariates) == pytest.approx(0.3, abs=1e-12)
        assert group_max(partition, line_spec, covariates) == 1.0

    def test_far_pair(self, line_spec):
        """Test that a pair at distance 0.8 gives M = 1.6."""
        covariates = points(0, 0.8)
        assert group_max(BlockPartition(((0, 1),)), line_spec, covariates) == pytest.approx(1.6, abs=1e-12)

    def test_equilateral_triple(self):
        """Test one triple with all pairwise distances 0.2."""
        premetric, covariates = table_premetric([[0, 0.2, 0.2], [0.2, 0, 0.2], [0.2, 0.2, 0]])
        assert penalty(BlockPartition(((0, 1, 2),)), premetric, covariates) == pytest.approx(0.4, abs=1e-12)

    def test_exact_max_below_row_bound(self):
        """Test a triple where the per-row bound overstates the group maximum."""
        premetric, covariates = table_premetric([[0, 1, 1], [1, 0, 0], [1, 0, 0]])
        partition = BlockPartition(((0, 1, 2),))
        assert group_max(partition, premetric, covariates) == 2.0
        assert group_max_bound(partition, premetric, covariates) == 3.0

    def test_matches_enumeration(self):
        """Test penalty and M against full enumeration on random partitions."""
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(2, 7))
            matrix = rng.uniform(0, 1, size=(n, n))
            matrix = np.triu(matrix, 1)
            matrix = matrix + matrix.T
            premetric, covariates = table_premetric(matrix)
            labels = rng.integers(0, 3, size=n)
            partition = BlockPartition.from_labels(labels.tolist())
            if partition.group_order() > 720:
                continue
            costs = enumerate_costs(partition, premetric, covariates)
            assert penalty(partition, premetric, covariates) == pytest.approx(math.fsum(costs) / len(costs), abs=1e-12)
            assert group_max(partition, premetric, covariates) == pytest.approx(max(1.0, max(costs)), abs=1e-12)
            assert group_max(partition, premetric, covariates) <= group_max_bound(partition, premetric, covariates)

    def test_partition_size_mismatch(self, line_spec):
        """Test that the partition must cover the covariates."""
        with pytest.raises(PartitionError):
            penalty(BlockPartition.singletons(2), line_spec, points(0, 1, 2))


class TestSamples:
    """Test cases for alpha_N and required_samples."""

    def test_alpha_n_value(self):
        """Test alpha_N at alpha 0.05, M 1, N 100000."""
        assert alpha_n(0.05, 1, 100000) == pytest.approx(0.0343756, abs=1e-6)

    def test_alpha_n_invalid(self):
        """Test that alpha outside (0, 1) and M below 1 are rejected."""
        with pytest.raises(ValueError):
            alpha_n(1.0, 1, 1000)
        with pytest.raises(ValueError):
            alpha_n(0.05, 0.5, 1000)

    def test_tiny_n_negative(self):
        """Test that a handful of samples gives a negative level."""
        assert alpha_n(0.05, 1, 10) < 0

    def test_required_samples_value(self):
        """Test the smallest sufficient N at alpha 0.05, M 1."""
        assert required_samples(0.05, 1) == 7716
        assert alpha_n(0.05, 1, 7716) > 0
        assert alpha_n(0.05, 1, 7715) <= 0

    def test_required_samples_monotone_in_alpha(self):
        """Test that a looser level needs far fewer samples."""
        assert required_samples(0.5, 1) == 34

    def test_required_samples_scales_with_m(self):
        """Test that doubling M roughly quadruples N."""
        assert abs(required_samples(0.05, 2) - 4 * 7716) <= 4


class TestBuildPartition:
    """Test cases for the greedy partition design."""

    def test_tiny_alpha_gives_singletons(self, line_spec):
        """Test that no merge fits under a tiny alpha."""
        partition = build_partition(points(0, 0.1, 0.25, 0.7), line_spec, 1e-9)
        assert partition.blocks == ((0,), (1,), (2,), (3,))

    def test_identical_covariates_merge(self, line_spec):
        """Test that zero-cost merges always happen."""
        partition = build_partition(points(0.5, 0.5, 0.9), line_spec, 1e-9)
        assert partition.blocks == ((0, 1), (2,))

    def test_penalty_within_half_alpha(self, line_spec):
        """Test that the final penalty never exceeds alpha / 2."""
        rng = np.random.default_rng(9)
        covariates = points(*rng.uniform(0, 1, 40))
        for alpha in (0.01, 0.05, 0.2):
            partition = build_partition(covariates, line_spec, alpha)
            assert penalty(partition, line_spec, covariates) <= alpha / 2

    def test_matched_pairs(self):
        """Test that nearest treated/control points are paired."""
        spec = PremetricSpec(numeric=(NumericTerm('x', 0.01),))
        covariates = points(0, 10, 0.1, 10.1)
        flags = [True, True, False, False]
        partition = build_partition(covariates, spec, 0.05, matched_pair_constraint(flags))
        assert partition.blocks == ((0, 2), (1, 3))
        assert partition.matched_pairs() == 2

    def test_constraint_respected_small_sets(self):
        """Test the constraint and the penalty limit on random small sets."""
        rng = np.random.default_rng(12)
        spec = PremetricSpec(numeric=(NumericTerm('x', 0.05),))
        for _ in range(20):
            n = int(rng.integers(2, 7))
            covariates = points(*rng.uniform(0, 1, n))
            flags = rng.random(n) < 0.5
            constraint = matched_pair_constraint(flags)
            partition = build_partition(covariates, spec, 0.05, constraint)
            assert all(constraint(block) for block in partition.blocks)
            assert penalty(partition, spec, covariates) <= 0.025
            assert partition.matched_pairs() <= min(int(flags.sum()), int((~flags).sum()))

    def test_max_block_size(self, zero_spec):
        """Test that a size cap holds even for free merges."""
        partition = build_partition(points(*range(7)), zero_spec, 0.05, max_block_size(3))
        assert max(partition.sizes) <= 3

    def test_all_of(self, zero_spec):
        """Test that combined constraints both hold."""
        flags = [True, False] * 4
        constraint = all_of(matched_pair_constraint(flags), max_block_size(1))
        partition = build_partition(points(*range(8)), zero_spec, 0.05, constraint)
        assert partition.sizes == [1] * 8

    def test_lexicographic_ties(self, zero_spec):
        """Test that equal-cost merges go to the smallest block pair."""
        partition = build_partition(points(*range(4)), zero_spec, 0.05, max_block_size(2))
        assert partition.blocks == ((0, 1), (2, 3))

    def test_invalid_alpha(self, line_spec):
        """Test that alpha outside (0, 1) is rejected."""
        with pytest.raises(ValueError):
            build_partition(points(0, 1), line_spec, 1.5)


class TestSampling:
    """Test cases for within-block permutation sampling."""

    def test_singletons_identity(self):
        """Test that singletons give the identity."""
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert list(sample_within_bin_permutation(BlockPartition.singletons(5), rng)) == [0, 1, 2, 3, 4]

    def test_blocks_preserved(self):
        """Test that every draw maps each block onto itself."""
        partition = BlockPartition(((0, 3, 5), (1,), (2, 4)))
        perms = PermutationSampler(partition).draw(np.random.default_rng(1), 500)
        for perm in perms:
            for block in partition.blocks:
                assert sorted(perm[list(block)]) == list(block)

    def test_pair_frequency(self):
        """Test that a pair swaps about half the time."""
        perms = PermutationSampler(BlockPartition(((0, 1),))).draw(np.random.default_rng(2), 10000)
        swaps = int(np.count_nonzero(perms[:, 0] == 1))
        assert abs(swaps - 5000) <= 3 * math.sqrt(10000 * 0.25)

    def test_triple_uniform(self):
        """Test that all six permutations of a triple are equally frequent."""
        perms = PermutationSampler(BlockPartition(((0, 1, 2),))).draw(np.random.default_rng(3), 60000)
        counts = Counter(tuple(p) for p in perms)
        assert len(counts) == 6
        assert chisquare(list(counts.values())).pvalue > 0.001

    def test_costs(self, line_spec):
        """Test per-draw costs against direct evaluation."""
        covariates = points(0, 0.3, 0.5, 0.9)
        partition = BlockPartition(((0, 2), (1, 3)))
        d = line_spec.pairwise(covariates)
        blocks = [line_spec.pairwise([covariates[i] for i in b]) for b in partition.blocks]
        sampler = PermutationSampler(partition, blocks)
        perms = sampler.draw(np.random.default_rng(4), 64)
        expected = [sum(d[t, p[t]] for t in range(4)) for p in perms]
        np.testing.assert_allclose(sampler.costs(perms), expected, atol=1e-15)


class TestExactTest:
    """Test cases for the exact randomization test."""

    def test_constant_statistic_never_rejects(self, paired_data, zero_spec):
        """Test that S(X) > S(X_pi) never holds for a constant statistic."""
        data, _ = paired_data
        stat = TestStatisticSpec.user_supplied(lambda v: 0.0)
        result = exact_test(data, BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3]), zero_spec, stat, 0.05)
        assert result.frac_exceed == 0.0
        assert result.reject is False
        assert result.n_samples == 'exact'

    def test_large_penalty_never_rejects(self, line_spec):
        """Test that a pair with penalty >= alpha cannot reject."""
        data = ObservationSet(points(0, 0.5), ['severe', 'mild'])
        stat = TestStatisticSpec.diff_conditional_proportions([True, False], ['severe'])
        result = exact_test(data, BlockPartition(((0, 1),)), line_spec, stat, 0.05)
        assert result.penalty == pytest.approx(0.5)
        assert result.reject is False

    def test_extreme_statistic_rejects(self, zero_spec):
        """Test that a statistic beating every other group element rejects."""
        n_pairs = 6
        covariates = points(*np.repeat(np.arange(n_pairs), 2))
        flags = [True, False] * n_pairs
        values = ['severe', 'mild'] * n_pairs
        data = ObservationSet(covariates, values)
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        partition = BlockPartition.from_labels(np.repeat(np.arange(n_pairs), 2).tolist())
        result = exact_test(data, partition, zero_spec, stat, 0.05)
        assert result.frac_exceed == pytest.approx(63 / 64)
        assert result.reject is True

    def test_budget_exceeded(self, paired_data, zero_spec):
        """Test that a group above the budget raises."""
        data, flags = paired_data
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        with pytest.raises(BudgetExceededError):
            exact_test(data, BlockPartition(((0, 1, 2, 3, 4, 5, 6, 7),)), zero_spec, stat, 0.05, budget=1000)

    def test_record(self, paired_data, zero_spec):
        """Test that the record carries the partition and premetric hash."""
        data, flags = paired_data
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        record = exact_test(data, BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3]), zero_spec, stat,
                            0.05).to_record()
        assert record['matched_pairs'] == 4
        assert record['partition'] == [[0, 1], [2, 3], [4, 5], [6, 7]]
        assert len(record['premetric_hash']) == 64


class TestSubsampledTest:
    """Test cases for the subsampled randomization test."""

    def test_insufficient_samples(self, paired_data, zero_spec):
        """Test that alpha_N <= 0 raises with the suggested N."""
        data, flags = paired_data
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        with pytest.raises(InsufficientSamplesError) as info:
            subsampled_test(data, BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3]), zero_spec, stat, 0.05,
                            100, seed=1)
        assert info.value.required_samples == 7716

    def test_positive_alpha_n_below_valid_range(self, line_spec):
        """Test that N with 2N / M^2 near 1 is refused even though alpha_N is positive."""
        covariates = [c for k in range(20) for c in points(2 * k, 2 * k + 0.5)]
        flags = [True, False] * 20
        data = ObservationSet(covariates, np.array(['severe', 'mild'] * 20), {'group': flags})
        partition = BlockPartition.from_labels([k // 2 for k in range(40)])
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        assert group_max(partition, line_spec, covariates) == pytest.approx(20.0)
        assert alpha_n(0.05, 20.0, 200) == pytest.approx(0.05)
        with pytest.raises(InsufficientSamplesError) as info:
            subsampled_test(data, partition, line_spec, stat, 0.05, 200, seed=1)
        assert info.value.n_samples == 200
        assert info.value.required_samples == required_samples(0.05, 20.0)
        assert info.value.required_samples > math.e * 20.0 ** 2 / 2

    def test_determinism(self, paired_data, zero_spec):
        """Test that the same seed gives the same result, independent of workers."""
        data, flags = paired_data
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        partition = BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3])
        first = subsampled_test(data, partition, zero_spec, stat, 0.05, 9000, seed=5, workers=1)
        second = subsampled_test(data, partition, zero_spec, stat, 0.05, 9000, seed=5, workers=3)
        assert first.to_record() == second.to_record()
        assert first.seed == 5 and first.n_samples == 9000

    def test_constant_statistic(self, paired_data, zero_spec):
        """Test that a constant statistic never rejects."""
        data, _ = paired_data
        stat = TestStatisticSpec.user_supplied(lambda v: 1.0, batch=lambda v: np.ones(len(v)))
        result = subsampled_test(data, BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3]), zero_spec, stat,
                                 0.05, 8000, seed=2)
        assert result.frac_exceed == 0.0
        assert result.reject is False

    def test_agrees_with_exact(self, paired_data, zero_spec):
        """Test that subsampled and exact exceedance fractions agree within Hoeffding slack."""
        data, flags = paired_data
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        partition = BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3])
        n = 20000
        exact = exact_test(data, partition, zero_spec, stat, 0.05)
        sampled = subsampled_test(data, partition, zero_spec, stat, 0.05, n, seed=8)
        assert abs(exact.frac_exceed - sampled.frac_exceed) <= math.sqrt(math.log(2 / 0.001) / (2 * n))

    def test_penalty_estimate(self, line_spec):
        """Test that the mean per-draw penalty tracks the closed form."""
        covariates = points(0, 0.01, 0.5, 0.52)
        flags = [True, False, True, False]
        data = ObservationSet(covariates, ['severe', 'mild', 'mild', 'severe'])
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        partition = BlockPartition(((0, 1), (2, 3)))
        result = subsampled_test(data, partition, line_spec, stat, 0.05, 10000, seed=3)
        assert result.penalty == pytest.approx(penalty(partition, line_spec, covariates), abs=0.002)
        assert result.alpha_n == pytest.approx(alpha_n(0.05, 1.0, 10000))


class TestRelabeling:
    """Test cases for invariance under relabeling of observation indices."""

    @staticmethod
    def relabeled(data, flags, partition, mapping):
        inverse = np.argsort(mapping)
        moved_flags = [flags[i] for i in inverse]
        return data.take(inverse), moved_flags, partition.relabel(mapping)

    @pytest.fixture
    def pairs(self):
        """Ten treated/control pairs sharing a covariate, with random outcomes."""
        rng = np.random.default_rng(44)
        covariates = [c for k in range(10) for c in points(k, k)]
        flags = [True, False] * 10
        values = rng.choice(['severe', 'mild'], size=20)
        partition = BlockPartition.from_labels([k // 2 for k in range(20)])
        return ObservationSet(covariates, values), flags, partition

    def test_exact_test_invariant(self, pairs, zero_spec):
        """Test that a consistent relabeling leaves the exact test unchanged."""
        data, flags, partition = pairs
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        base = exact_test(data, partition, zero_spec, stat, 0.05)
        rng = np.random.default_rng(45)
        for _ in range(3):
            mapping = rng.permutation(20)
            moved, moved_flags, moved_partition = self.relabeled(data, flags, partition, mapping)
            stat_moved = TestStatisticSpec.diff_conditional_proportions(moved_flags, ['severe'])
            result = exact_test(moved, moved_partition, zero_spec, stat_moved, 0.05)
            assert result.statistic == pytest.approx(base.statistic, abs=1e-12)
            assert result.frac_exceed == base.frac_exceed
            assert result.penalty == pytest.approx(base.penalty, abs=1e-12)
            assert result.reject == base.reject

    def test_subsampled_test_invariant(self, zero_spec):
        """Test that a consistent relabeling gives the same subsampled decision."""
        covariates = [c for k in range(10) for c in points(k, k)]
        flags = [True, False] * 10
        data = ObservationSet(covariates, np.array(['severe', 'mild'] * 10))
        partition = BlockPartition.from_labels([k // 2 for k in range(20)])
        stat = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        base = subsampled_test(data, partition, zero_spec, stat, 0.05, 50000, seed=6)
        assert base.reject is True

        mapping = np.random.default_rng(46).permutation(20)
        moved, moved_flags, moved_partition = self.relabeled(data, flags, partition, mapping)
        stat_moved = TestStatisticSpec.diff_conditional_proportions(moved_flags, ['severe'])
        result = subsampled_test(moved, moved_partition, zero_spec, stat_moved, 0.05, 50000, seed=6)
        assert result.reject == base.reject
        assert abs(result.frac_exceed - base.frac_exceed) < 0.01
