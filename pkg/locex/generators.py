"""
Locex Synthetic Generators

Seeded generators of locally exchangeable processes on a one-dimensional
covariate column ``x``, each paired with the premetric it is locally
exchangeable under and, where one is known, the analytic d_sc.

Generators:
    iid                 iid draws from a mass vector (zero premetric)
    jump                X_x = 1[x >= U], U ~ Unif[0, 1]
    square_wave         X_x = sgn sin(2 pi (x - U)), sgn(0) = +1
    switching_mixture   X_x ~ mu0 if x < U else mu1, independently per x
    latent_gaussian     RBF Gaussian process plus independent noise,
                        optionally quantized onto a finite alphabet

Usage:
    spec = GeneratorSpec('jump', seed=7)
    bundle = simulate(spec, np.linspace(0, 1, 30), n_realizations=2000)
"""

import logging
import math
from configparser import ConfigParser
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from locex.errors import GeneratorError
from locex.local_empirical import ObservationSet
from locex.premetric import Covariate, NumericTerm, PremetricSpec
from locex.premetric_estimation import FiniteAlphabetMeasure, RealizationBundle, tv_discrete
from locex.streams import REALIZATIONS, SeedLike, derive_rng, parallel_map, seed_sequence, stream_id

logger = logging.getLogger(__name__)

IID = 'iid'
JUMP = 'jump'
SQUARE_WAVE = 'square_wave'
SWITCHING_MIXTURE = 'switching_mixture'
LATENT_GAUSSIAN = 'latent_gaussian'
KINDS = (IID, JUMP, SQUARE_WAVE, SWITCHING_MIXTURE, LATENT_GAUSSIAN)

COVARIATE_COLUMN = 'x'
COVARIANCE_JITTER = 1e-10
MAX_LATENT_LOCATIONS = 2000
MASS_TOLERANCE = 1e-12


def _check_mass(mass: Sequence[float], name: str = 'mass') -> np.ndarray:
    mass = np.asarray(mass, dtype=float)
    if mass.ndim != 1 or mass.size == 0:
        raise GeneratorError(f"{name} must be a nonempty vector")
    if not np.all(np.isfinite(mass)) or np.any(mass < 0):
        raise GeneratorError(f"{name} must be finite and nonnegative")
    if abs(math.fsum(mass) - 1.0) > MASS_TOLERANCE:
        raise GeneratorError(f"{name} sums to {math.fsum(mass)!r}, not 1")
    return mass


def _locations(locations: Sequence[float]) -> np.ndarray:
    x = np.asarray(locations, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise GeneratorError("locations must be finite")
    return x


def _unit_locations(locations: Sequence[float]) -> np.ndarray:
    x = _locations(locations)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise GeneratorError("locations must lie in [0, 1]")
    return x


def _observations(x: np.ndarray, values: np.ndarray) -> ObservationSet:
    return ObservationSet([Covariate(numeric=(float(v),)) for v in x], values)


def _draw_symbols(mass: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF symbol codes for the given uniforms."""
    codes = np.searchsorted(np.cumsum(mass), uniforms, side='right')
    return np.minimum(codes, mass.size - 1)


# =============================================================================
# Generators
# =============================================================================
def gen_iid(mass: Sequence[float], locations: Sequence[float], seed: SeedLike,
            alphabet: Optional[Sequence[Any]] = None) -> ObservationSet:
    """
    Iid draws from ``mass`` at every location.

    Args:
        mass: Probability mass over the alphabet
        locations: Covariate locations
        seed: Seed for this realization
        alphabet: Symbols, defaulting to 0..K-1

    Returns:
        ObservationSet; the matching premetric is identically 0
    """
    mass = _check_mass(mass)
    x = _locations(locations)
    symbols = np.asarray(alphabet if alphabet is not None else np.arange(mass.size))
    if symbols.size != mass.size:
        raise GeneratorError(f"{symbols.size} symbols for {mass.size} masses")
    rng = derive_rng(seed)
    return _observations(x, symbols[_draw_symbols(mass, rng.random(x.size))])


def gen_jump(locations: Sequence[float], seed: SeedLike) -> ObservationSet:
    """X_x = 1 iff x >= U for one U ~ Unif[0, 1] per realization."""
    x = _unit_locations(locations)
    rng = derive_rng(seed)
    jump_at = rng.random()
    return _observations(x, (x >= jump_at).astype(np.int64))


def gen_square_wave(locations: Sequence[float], seed: SeedLike) -> ObservationSet:
    """Unit-period square wave shifted by a uniform, values +1 and -1."""
    x = _locations(locations)
    rng = derive_rng(seed)
    shift = rng.random()
    phase = np.mod(x - shift, 1.0)
    return _observations(x, np.where(phase <= 0.5, 1, -1).astype(np.int64))


def gen_switching_mixture(mu0: Sequence[float], mu1: Sequence[float], locations: Sequence[float],
                          seed: SeedLike, alphabet: Optional[Sequence[Any]] = None) -> ObservationSet:
    """
    X_x drawn independently from mu0 when x < U and from mu1 otherwise.

    With mu0 = (1, 0) and mu1 = (0, 1) the output equals gen_jump for the
    same seed.
    """
    mu0 = _check_mass(mu0, 'mu0')
    mu1 = _check_mass(mu1, 'mu1')
    if mu0.size != mu1.size:
        raise GeneratorError(f"mu0 has {mu0.size} symbols but mu1 has {mu1.size}")
    x = _unit_locations(locations)
    symbols = np.asarray(alphabet if alphabet is not None else np.arange(mu0.size))
    if symbols.size != mu0.size:
        raise GeneratorError(f"{symbols.size} symbols for {mu0.size} masses")

    rng = derive_rng(seed)
    switch_at = rng.random()
    uniforms = rng.random(x.size)
    before = x < switch_at
    codes = np.where(before, _draw_symbols(mu0, uniforms), _draw_symbols(mu1, uniforms))
    return _observations(x, symbols[codes])


@dataclass(frozen=True)
class UniformQuantizer:
    """Maps reals onto codes 0..levels-1 by equal-width bins over [lower, upper], clipping outside."""

    lower: float
    upper: float
    levels: int

    def __post_init__(self):
        if not self.upper > self.lower:
            raise GeneratorError(f"quantizer upper must exceed lower, got [{self.lower}, {self.upper}]")
        if self.levels < 2:
            raise GeneratorError(f"quantizer needs at least 2 levels, got {self.levels}")

    @property
    def alphabet(self) -> Tuple[int, ...]:
        return tuple(range(self.levels))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        width = (self.upper - self.lower) / self.levels
        codes = np.floor((np.asarray(values, dtype=float) - self.lower) / width)
        return np.clip(codes, 0, self.levels - 1).astype(np.int64)


def rbf_kernel(distance: np.ndarray, width: float) -> np.ndarray:
    """k(r) = exp(-r^2 / (2 w^2))."""
    distance = np.asarray(distance, dtype=float)
    return np.exp(-distance * distance / (2.0 * width * width))


def gen_latent_gaussian(width: float, noise_var: float, locations: Sequence[float], seed: SeedLike,
                        replicates: int = 1, quantizer: Optional[UniformQuantizer] = None) -> ObservationSet:
    """
    Latent RBF Gaussian process observed with independent Gaussian noise.

    Replicates at one location share its latent value and differ only by
    noise. Observations are ordered location-major.

    Args:
        width: Kernel width w > 0
        noise_var: Noise variance sigma^2 > 0
        locations: Covariate locations (at most 2000 distinct)
        seed: Seed for this realization
        replicates: Observations per location
        quantizer: Optional map onto a finite alphabet

    Returns:
        ObservationSet of floats, or of integer codes when quantized
    """
    if not width > 0:
        raise GeneratorError(f"kernel width must be > 0, got {width}")
    if not noise_var > 0:
        raise GeneratorError(f"noise variance must be > 0, got {noise_var}")
    if replicates < 1:
        raise GeneratorError(f"replicates must be >= 1, got {replicates}")
    x = _locations(locations)
    unique, inverse = np.unique(x, return_inverse=True)
    if unique.size > MAX_LATENT_LOCATIONS:
        raise GeneratorError(
            f"{unique.size} distinct locations exceed the dense factorization limit of {MAX_LATENT_LOCATIONS}"
        )

    covariance = rbf_kernel(np.abs(unique[:, None] - unique[None, :]), width)
    covariance[np.diag_indices_from(covariance)] += COVARIANCE_JITTER
    try:
        factor = cholesky(covariance, lower=True)
    except LinAlgError as e:
        raise GeneratorError(f"covariance is not positive definite after jitter: {e}") from e

    rng = derive_rng(seed)
    latent = factor @ rng.standard_normal(unique.size)
    per_observation = np.repeat(latent[inverse], replicates)
    noise = math.sqrt(noise_var) * rng.standard_normal(per_observation.size)
    values = per_observation + noise
    if quantizer is not None:
        values = quantizer(values)
    return _observations(np.repeat(x, replicates), values)


# =============================================================================
# Ground truth
# =============================================================================
def jump_dsc(t: float, t_prime: float) -> float:
    """d_sc of the jump process on [0, 1]."""
    return abs(t - t_prime)


def square_wave_dsc(t: float, t_prime: float) -> float:
    """
    d_sc of the shifted square wave: twice the distance on the unit circle,
    capped at 1, which is the probability that a sign change falls between
    t and t'.
    """
    delta = abs(t - t_prime) % 1.0
    return min(1.0, 2.0 * min(delta, 1.0 - delta))


def switching_mixture_dsc(mu0: Sequence[float], mu1: Sequence[float], t: float, t_prime: float) -> float:
    """|t - t'| * d_TV(mu0, mu1)."""
    mu0 = _check_mass(mu0, 'mu0')
    mu1 = _check_mass(mu1, 'mu1')
    alphabet = tuple(range(mu0.size))
    return abs(t - t_prime) * tv_discrete(FiniteAlphabetMeasure(alphabet, mu0), FiniteAlphabetMeasure(alphabet, mu1))


def latent_gaussian_dsc(width: float, noise_var: float, distance: float) -> float:
    """
    Exact d_sc of the latent RBF process at separation ``distance``:
    (2 / pi) * arctan(sqrt(2 (1 - k(r))) / (2 sigma)).
    """
    spread = math.sqrt(2.0 * (1.0 - float(rbf_kernel(distance, width))))
    return 2.0 / math.pi * math.atan(spread / (2.0 * math.sqrt(noise_var)))


def latent_gaussian_dsc_bound(width: float, noise_var: float, distance: float) -> float:
    """Upper bound sqrt(2 (k(0) - k(r)) / (pi sigma^2)) on latent_gaussian_dsc."""
    return math.sqrt(2.0 * (1.0 - float(rbf_kernel(distance, width))) / (math.pi * noise_var))


def latent_gaussian_weight(width: float, noise_var: float) -> float:
    """Premetric weight 1 / (w sigma sqrt(pi)) of the latent RBF process."""
    return 1.0 / (width * math.sqrt(noise_var) * math.sqrt(math.pi))


# =============================================================================
# Specs
# =============================================================================
def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(',') if v.strip())


@dataclass(frozen=True)
class GeneratorSpec:
    """
    Generator kind, its parameters and the master seed.

    Parameters by kind: iid takes ``mass``; switching_mixture takes ``mu0``
    and ``mu1``; latent_gaussian takes ``width``, ``noise_var``,
    ``replicates`` and optionally ``quantizer_lower``, ``quantizer_upper``,
    ``quantizer_levels``.
    """

    kind: str
    seed: int = 0
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeneratorError(f"unknown generator kind '{self.kind}'; expected one of {', '.join(KINDS)}")
        if int(self.seed) < 0:
            raise GeneratorError(f"seed must be non-negative, got {self.seed}")
        params = dict(self.params)
        if self.kind == IID:
            _check_mass(params.get('mass', ()))
        elif self.kind == SWITCHING_MIXTURE:
            mu0 = _check_mass(params.get('mu0', ()), 'mu0')
            mu1 = _check_mass(params.get('mu1', ()), 'mu1')
            if mu0.size != mu1.size:
                raise GeneratorError("mu0 and mu1 must share one alphabet")
        elif self.kind == LATENT_GAUSSIAN:
            for key in ('width', 'noise_var'):
                if not float(params.get(key, 0.0)) > 0:
                    raise GeneratorError(f"latent_gaussian needs {key} > 0")
            params.setdefault('replicates', 1)
            self.quantizer_from(params)
        object.__setattr__(self, 'params', params)

    @staticmethod
    def quantizer_from(params: Dict[str, Any]) -> Optional[UniformQuantizer]:
        if 'quantizer_levels' not in params:
            return None
        return UniformQuantizer(float(params['quantizer_lower']), float(params['quantizer_upper']),
                                int(params['quantizer_levels']))

    @property
    def quantizer(self) -> Optional[UniformQuantizer]:
        return self.quantizer_from(self.params)

    def with_seed(self, seed: int) -> 'GeneratorSpec':
        return GeneratorSpec(self.kind, seed, dict(self.params))

    def to_config(self, config: Optional[ConfigParser] = None, section: str = 'generator') -> ConfigParser:
        config = config if config is not None else ConfigParser()
        values = {'kind': self.kind, 'seed': str(int(self.seed))}
        for key, value in sorted(self.params.items()):
            if isinstance(value, (list, tuple, np.ndarray)):
                values[key] = ', '.join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                values[key] = repr(value)
            else:
                values[key] = str(value)
        config[section] = values
        return config

    @classmethod
    def from_config(cls, config: ConfigParser, section: str = 'generator') -> 'GeneratorSpec':
        if not config.has_section(section):
            raise GeneratorError(f"configuration has no [{section}] section")
        kind = config.get(section, 'kind').strip()
        seed = config.getint(section, 'seed', fallback=0)
        params: Dict[str, Any] = {}
        try:
            for key in ('mass', 'mu0', 'mu1'):
                if config.has_option(section, key):
                    params[key] = _floats(config.get(section, key))
            for key in ('width', 'noise_var', 'quantizer_lower', 'quantizer_upper'):
                if config.has_option(section, key):
                    params[key] = config.getfloat(section, key)
            for key in ('replicates', 'quantizer_levels'):
                if config.has_option(section, key):
                    params[key] = config.getint(section, key)
        except ValueError as e:
            raise GeneratorError(f"[{section}]: {e}") from e
        return cls(kind, seed, params)


def generate(spec: GeneratorSpec, locations: Sequence[float], seed: Optional[SeedLike] = None) -> ObservationSet:
    """One realization of ``spec`` at ``locations``, seeded by ``seed`` or spec.seed."""
    seed = spec.seed if seed is None else seed
    params = spec.params
    if spec.kind == IID:
        return gen_iid(params['mass'], locations, seed)
    if spec.kind == JUMP:
        return gen_jump(locations, seed)
    if spec.kind == SQUARE_WAVE:
        return gen_square_wave(locations, seed)
    if spec.kind == SWITCHING_MIXTURE:
        return gen_switching_mixture(params['mu0'], params['mu1'], locations, seed)
    return gen_latent_gaussian(float(params['width']), float(params['noise_var']), locations, seed,
                               replicates=int(params.get('replicates', 1)), quantizer=spec.quantizer)


def simulate(spec: GeneratorSpec, locations: Sequence[float], n_realizations: int,
             workers: Optional[int] = None) -> RealizationBundle:
    """
    Independent realizations, realization r seeded by (spec.seed, realizations, r).

    The bundle does not depend on the worker count.
    """
    if n_realizations < 1:
        raise GeneratorError(f"n_realizations must be >= 1, got {n_realizations}")
    realization_stream = stream_id(REALIZATIONS)

    def run(index: int) -> ObservationSet:
        return generate(spec, locations, seed_sequence(spec.seed, realization_stream, index))

    realizations = parallel_map(run, range(n_realizations), workers)
    logger.info(f"Simulated {n_realizations} {spec.kind} realizations at {len(locations)} locations (seed {spec.seed})")
    return RealizationBundle(realizations)


def matching_premetric(spec: GeneratorSpec) -> PremetricSpec:
    """Premetric on column ``x`` under which ``spec`` is locally exchangeable."""
    if spec.kind == IID:
        weight = 0.0
    elif spec.kind == JUMP:
        weight = 1.0
    elif spec.kind == SQUARE_WAVE:
        return PremetricSpec(numeric=(NumericTerm(COVARIATE_COLUMN, 2.0, period=1.0),))
    elif spec.kind == SWITCHING_MIXTURE:
        weight = switching_mixture_dsc(spec.params['mu0'], spec.params['mu1'], 0.0, 1.0)
    else:
        weight = latent_gaussian_weight(float(spec.params['width']), float(spec.params['noise_var']))
    return PremetricSpec(numeric=(NumericTerm(COVARIATE_COLUMN, weight),))
