"""
Monte Carlo acceptance tests: finite-sample guarantees, type-1 error control,
estimator consistency, qualitative trends and generator conformance.

These are slow; deselect with -m "not slow".
"""

import math
import time
from collections import Counter

import numpy as np
import pytest

from locex.generators import GeneratorSpec, UniformQuantizer, generate, matching_premetric, simulate
from locex.local_empirical import (
    ObservationSet,
    TestFunctionSpec,
    b_coefficients,
    estimate,
    local_empirical_measure,
    optimal_weights,
    squared_error_bound,
    tail_bound,
)
from locex.premetric import BlockPartition, Covariate, NumericTerm, PremetricSpec
from locex.premetric_estimation import RealizationBundle, estimate_dsc
from locex.randomization import (
    TestStatisticSpec,
    alpha_n,
    build_partition,
    exact_test,
    group_max,
    matched_pair_constraint,
    required_samples,
    subsampled_test,
)

pytestmark = pytest.mark.slow

ALPHA = 0.05


def at(x):
    return Covariate(numeric=(float(x),))


def rejection_slack(n):
    return 3 * math.sqrt(ALPHA * (1 - ALPHA) / n)


class TestErrorBounds:
    """Finite-sample error bounds on the jump process."""

    def test_bounds_hold(self):
        """Test mean squared error and tail probabilities against their bounds."""
        n_realizations = 2000
        observed = np.linspace(0, 1, 30)
        queries = np.array([0.1, 0.33, 0.5, 0.77, 0.93])
        premetric = PremetricSpec(numeric=(NumericTerm('x', 1.0),))
        bundle = simulate(GeneratorSpec('jump', seed=101), np.concatenate([observed, queries]), n_realizations)
        values = np.array([np.asarray(r.values, dtype=float) for r in bundle])
        # G_tau(1[x = 1]) is X_tau itself once U is fixed
        x_obs, truth = values[:, :observed.size], values[:, observed.size:]

        for q, tau in enumerate(queries):
            b = b_coefficients('indicator', premetric.distances_to([at(x) for x in observed], at(tau)))
            weights = optimal_weights(b).weights
            errors = x_obs @ weights - truth[:, q]

            squared = errors ** 2
            bound = squared_error_bound(weights, b)
            assert squared.mean() <= bound + 3 * squared.std(ddof=1) / math.sqrt(n_realizations)

            for delta in (0.2, 0.3, 0.5):
                rate = float(np.mean(np.abs(errors) > delta))
                sigma = math.sqrt(max(rate * (1 - rate), 1e-12) / n_realizations)
                assert rate <= tail_bound(weights, b, delta) + 3 * sigma


class TestTypeOneError:
    """Type-1 error control of the randomization tests."""

    def test_exact_iid_pairs(self):
        """Test the exact test on iid data in four matched pairs."""
        n_datasets = 2000
        flags = [True, False] * 4
        partition = BlockPartition.from_labels([0, 0, 1, 1, 2, 2, 3, 3])
        premetric = PremetricSpec(numeric=(NumericTerm('x', 0.0),))
        statistic = TestStatisticSpec.diff_conditional_proportions(flags, ['severe'])
        spec = GeneratorSpec('iid', params={'mass': (0.5, 0.5)})

        rejections = 0
        for seed in range(n_datasets):
            draw = generate(spec, np.repeat(np.arange(4.0), 2), seed)
            data = ObservationSet(draw.covariates, np.where(draw.values == 1, 'severe', 'mild'))
            rejections += exact_test(data, partition, premetric, statistic, ALPHA).reject
        assert rejections / n_datasets <= ALPHA + rejection_slack(n_datasets)

    def test_subsampled_jump_null(self):
        """Test the subsampled test on the jump process with its matching premetric."""
        n_datasets = 1000
        pairs = np.linspace(0.04, 0.96, 12)
        locations = np.sort(np.concatenate([pairs, pairs + 0.001]))
        flags = [True, False] * 12
        spec = GeneratorSpec('jump', seed=55)
        premetric = matching_premetric(spec)
        partition = BlockPartition.from_labels(np.repeat(np.arange(12), 2).tolist())
        statistic = TestStatisticSpec.diff_conditional_proportions(flags, [1])

        m = group_max(partition, premetric, [at(x) for x in locations])
        n_samples = max(20000, required_samples(ALPHA, m) + 1000)
        assert alpha_n(ALPHA, m, n_samples) > 0

        bundle = simulate(spec, locations, n_datasets)
        rejections = 0
        for index, data in enumerate(bundle):
            result = subsampled_test(data, partition, premetric, statistic, ALPHA, n_samples, seed=index, workers=1)
            rejections += result.reject
        assert rejections / n_datasets <= ALPHA + rejection_slack(n_datasets)

    def test_alpha_n_configuration(self):
        """Test alpha_N at alpha 0.05 with 100000 randomizations."""
        assert alpha_n(0.05, 1.0, 100000) == pytest.approx(0.034376, abs=1e-6)


class TestDscConsistency:
    """Estimation of d_sc from repeated realizations."""

    def test_switching_mixture(self):
        """Test the estimate at (0.3, 0.5) and its error as N doubles."""
        spec = GeneratorSpec('switching_mixture', seed=21, params={'mu0': (1.0, 0.0), 'mu1': (0.5, 0.5)})
        ell = matching_premetric(spec)
        grid = np.round(np.arange(101) * 0.01, 10)
        bundle = simulate(spec, grid, 2000)

        errors, ses = [], []
        for n in (250, 500, 1000, 2000):
            result = estimate_dsc(RealizationBundle(bundle.realizations[:n]), at(0.3), at(0.5), ell)
            errors.append(abs(result.estimate - 0.1))
            ses.append(result.standard_error)

        assert errors[-1] <= 0.05
        for k in range(len(errors) - 1):
            assert errors[k + 1] <= errors[k] + 2 * (ses[k] + ses[k + 1])


class TestQualitativeTrends:
    """Trends across the premetric scale on cyclic-time data."""

    @pytest.fixture
    def hours(self):
        rng = np.random.default_rng(8)
        return rng.uniform(0, 24, 200)

    def spec(self, weight):
        return PremetricSpec(numeric=(NumericTerm('hour', weight, period=24.0),))

    def test_atom_count_decreases(self, hours):
        """Test that the active atom count per query does not grow with the weight."""
        covariates = [at(h) for h in hours]
        data = ObservationSet(covariates, np.zeros(len(hours), dtype=np.int64))
        for tau in np.linspace(0, 24, 12, endpoint=False):
            counts = [local_empirical_measure(data, at(tau), self.spec(w), 'indicator').active_count
                      for w in (0.0, 1e-4, 1e-2, 1.0)]
            assert counts[0] == len(hours)
            assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_matched_pairs_decrease(self, hours):
        """Test that the matched-pair count does not grow with the weight."""
        covariates = [at(h) for h in hours]
        flags = np.arange(len(hours)) % 2 == 0
        counts = [
            build_partition(covariates, self.spec(w), ALPHA, matched_pair_constraint(flags)).matched_pairs()
            for w in (0.0, 1e-4, 1e-2, 1.0)
        ]
        assert counts[0] == len(hours) // 2
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_estimate_scales_near_linearly(self):
        """Test that doubling the data at most about doubles the estimate time."""
        rng = np.random.default_rng(2)
        spec = self.spec(0.01)
        h = TestFunctionSpec.indicator_of([1])

        def timed(n):
            data = ObservationSet([at(x) for x in rng.uniform(0, 24, n)], rng.integers(0, 2, n))
            total = 0.0
            for _ in range(20):
                start = time.perf_counter()
                estimate(local_empirical_measure(data, at(12.0), spec, h), h)
                total += time.perf_counter() - start
            return total / 20

        timed(1000)
        assert timed(20000) / timed(10000) <= 2.6


def _cells(values):
    return Counter(map(tuple, values))


def _tv_and_slack(a, b):
    n = a.shape[0]
    p, q = _cells(a), _cells(b)
    keys = set(p) | set(q)
    tv = 0.5 * sum(abs(p[k] - q[k]) for k in keys) / n
    slack = 1.5 * sum(math.sqrt((p[k] + q[k]) / n) for k in keys) / math.sqrt(n)
    return tv, slack


class TestSwapConformance:
    """Generators against their matching premetrics under random swaps."""

    @pytest.mark.parametrize('spec, coarsen', [
        (GeneratorSpec('iid', seed=1, params={'mass': (0.2, 0.3, 0.5)}), None),
        (GeneratorSpec('jump', seed=2), None),
        (GeneratorSpec('square_wave', seed=3), None),
        (GeneratorSpec('switching_mixture', seed=4, params={'mu0': (0.7, 0.2, 0.1), 'mu1': (0.1, 0.3, 0.6)}), None),
        (GeneratorSpec('latent_gaussian', seed=5, params={'width': 0.3, 'noise_var': 0.5}),
         UniformQuantizer(-1.0, 1.0, 3)),
    ])
    def test_swap_bound(self, spec, coarsen):
        """Test that moving observations costs at most the summed premetric in TV."""
        n_realizations = 20000
        rng = np.random.default_rng(spec.seed + 100)
        premetric = matching_premetric(spec)

        swaps = []
        locations = []
        for _ in range(20):
            k = int(rng.integers(1, 4))
            points = rng.uniform(0, 1, 2 * k)
            start = len(locations)
            locations.extend(points.tolist())
            swaps.append((list(range(start, start + k)), list(range(start + k, start + 2 * k))))

        bundle = simulate(spec, locations, n_realizations)
        values = np.array([np.asarray(r.values) for r in bundle])
        if coarsen is not None:
            values = coarsen(values)

        for source, image in swaps:
            tv, slack = _tv_and_slack(values[:, source], values[:, image])
            cost = sum(premetric.evaluate(at(locations[s]), at(locations[t])) for s, t in zip(source, image))
            assert tv <= cost + slack
