"""
Locex

Estimation and testing under local exchangeability: premetrics over
covariates, optimally weighted local empirical measures with finite-sample
error bounds, local randomization tests and estimation of the strong
canonical premetric from repeated realizations.
"""

__version__ = '0.1.0'

from .errors import (
    BudgetExceededError,
    DataError,
    EstimationError,
    GeneratorError,
    InsufficientSamplesError,
    LocexError,
    PartitionError,
    PremetricError,
    SchemaError,
)
from .local_empirical import (
    LocalEmpiricalMeasure,
    ObservationSet,
    TestFunctionSpec,
    b_coefficient,
    confidence_radius,
    estimate,
    estimate_curve,
    local_empirical_measure,
    optimal_weights,
    squared_error_bound,
    tail_bound,
)
from .premetric import (
    BlockPartition,
    CategoricalTerm,
    Covariate,
    NumericTerm,
    PremetricSpec,
    TablePremetric,
    diameter,
    sufficiency_defect_bound,
    validate_premetric,
)
from .premetric_estimation import FiniteAlphabetMeasure, RealizationBundle, estimate_dsc, tv_discrete
from .randomization import (
    TestResult,
    TestStatisticSpec,
    alpha_n,
    build_partition,
    exact_test,
    group_max,
    penalty,
    required_samples,
    subsampled_test,
)

__all__ = [
    'BlockPartition', 'BudgetExceededError', 'CategoricalTerm', 'Covariate', 'DataError', 'EstimationError',
    'FiniteAlphabetMeasure', 'GeneratorError', 'InsufficientSamplesError', 'LocalEmpiricalMeasure',
    'LocexError', 'NumericTerm', 'ObservationSet', 'PartitionError', 'PremetricError', 'PremetricSpec',
    'RealizationBundle', 'SchemaError', 'TablePremetric', 'TestFunctionSpec', 'TestResult',
    'TestStatisticSpec', 'alpha_n', 'b_coefficient', 'build_partition', 'confidence_radius', 'diameter',
    'estimate', 'estimate_curve', 'estimate_dsc', 'exact_test', 'group_max', 'local_empirical_measure',
    'optimal_weights', 'penalty', 'required_samples', 'squared_error_bound', 'subsampled_test',
    'sufficiency_defect_bound', 'tail_bound', 'tv_discrete', 'validate_premetric',
]
