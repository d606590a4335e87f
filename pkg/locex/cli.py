"""
Locex Command-Line Interface

Usage:
    locex estimate --data records.csv --schema study.ini --query-grid hour=0:24:50
    locex test --data records.csv --schema study.ini --seed 7 --n-perms 100000 --constraint matched-pairs
    locex design --data covariates.csv --schema study.ini --alpha 0.05
    locex estimate-premetric --data draws.csv --schema draws.ini --t x=0.3 --t-prime x=0.5
    locex simulate --generator jump.ini --grid 0:1:30 --n-realizations 2000 --seed 7 --csv draws.csv
    locex validate-premetric --data covariates.csv --schema study.ini

Every command writes one JSON document (keys sorted) to --out or stdout,
embedding the RunManifest needed to reproduce it.
"""

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from configparser import ConfigParser
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from locex import __version__
from locex.dataset import DatasetSchema, emit, ingest, ingest_covariates, load_config
from locex.errors import InsufficientSamplesError, LocexError, SchemaError
from locex.generators import LATENT_GAUSSIAN, GeneratorSpec, matching_premetric, simulate
from locex.local_empirical import INDICATOR, ObservationSet, TestFunctionSpec, confidence_radius, \
    estimate_curve, optimal_weights, b_coefficients, squared_error_bound
from locex.premetric import Covariate, PremetricSpec, validate_premetric
from locex.premetric_estimation import RealizationBundle, estimate_dsc
from locex.randomization import DEFAULT_CHUNK_SIZE, DEFAULT_ENUMERATION_BUDGET, TestStatisticSpec, \
    all_of, build_partition, exact_test, group_max, matched_pair_constraint, max_block_size, no_constraint, \
    penalty, required_samples, subsampled_test
from locex.streams import default_workers

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# =============================================================================
# Manifest and runtime settings
# =============================================================================
@dataclass
class RunManifest:
    """Everything needed to reproduce one command's output."""

    command: str
    schema_hash: Optional[str] = None
    premetric: Optional[str] = None
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def to_record(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'schema_hash': self.schema_hash,
            'premetric': self.premetric,
            'seed': self.seed,
            'params': self.params,
            'version': self.version,
        }


@dataclass
class RuntimeSettings:
    """[runtime] section: worker threads, exact-test budget, draws per seed stream."""

    workers: int
    enumeration_budget: int = DEFAULT_ENUMERATION_BUDGET
    chunk_size: int = DEFAULT_CHUNK_SIZE

    @classmethod
    def from_config(cls, config: ConfigParser) -> 'RuntimeSettings':
        return cls(
            workers=config.getint('runtime', 'workers', fallback=default_workers()),
            enumeration_budget=config.getint('runtime', 'enumeration_budget', fallback=DEFAULT_ENUMERATION_BUDGET),
            chunk_size=config.getint('runtime', 'chunk_size', fallback=DEFAULT_CHUNK_SIZE),
        )


def json_safe(value: Any) -> Any:
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python ones."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return 'inf' if value > 0 else ('-inf' if value < 0 else 'nan')
    return value


def to_json(record: Dict[str, Any]) -> str:
    return json.dumps(json_safe(record), sort_keys=True, indent=2, allow_nan=False) + '\n'


# =============================================================================
# Query parsing
# =============================================================================
def parse_assignments(text: str) -> Dict[str, str]:
    """Parse 'col=value,col=value' into a mapping."""
    result = {}
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        if '=' not in part:
            raise SchemaError(f"expected column=value, got '{part}'")
        key, value = part.split('=', 1)
        result[key.strip()] = value.strip()
    return result


def _grid_values(spec: PremetricSpec, column: str, text: str) -> List[float]:
    try:
        start, stop, count = text.split(':')
        start, stop, count = float(start), float(stop), int(count)
    except ValueError:
        raise SchemaError(f"grid for '{column}' must be start:stop:count, got '{text}'") from None
    if count < 1:
        raise SchemaError(f"grid for '{column}' needs a positive count")
    term = next((t for t in spec.numeric if t.column == column), None)
    if term is None:
        raise SchemaError(f"grid column '{column}' is not a numeric premetric column")
    return np.linspace(start, stop, count, endpoint=not term.cyclic).tolist()


def parse_queries(spec: PremetricSpec, queries: Sequence[str] = (), grids: Sequence[str] = ()) -> List[Covariate]:
    """
    Query covariates from --query and --query-grid arguments.

    A grid argument mixes 'col=start:stop:count' axes (evenly spaced, endpoint
    excluded for cyclic columns) with fixed 'col=value' entries; the axes are
    crossed in the order given.
    """
    covariates = [spec.covariate_from_mapping(parse_assignments(q)) for q in queries]
    for grid in grids:
        fixed: Dict[str, Any] = {}
        axes: List[tuple] = []
        for column, value in parse_assignments(grid).items():
            if ':' in value:
                axes.append((column, _grid_values(spec, column, value)))
            else:
                fixed[column] = value
        for combination in itertools.product(*(values for _, values in axes)):
            mapping = dict(fixed)
            mapping.update({column: v for (column, _), v in zip(axes, combination)})
            covariates.append(spec.covariate_from_mapping(mapping))
    return covariates


def parse_constraint(text: str, group_flags: Optional[np.ndarray] = None):
    """none | matched-pairs | max-size:K, combinable with '+'."""
    constraints = []
    for part in (text or 'none').split('+'):
        part = part.strip()
        if part == 'none':
            constraints.append(no_constraint())
        elif part == 'matched-pairs':
            if group_flags is None:
                raise SchemaError("the matched-pairs constraint needs a group column in the schema")
            constraints.append(matched_pair_constraint(group_flags))
        elif part.startswith('max-size:'):
            try:
                size = int(part.split(':', 1)[1])
            except ValueError:
                raise SchemaError(f"max-size needs an integer, got '{part}'") from None
            if size < 1:
                raise SchemaError(f"max-size must be positive, got {size}")
            constraints.append(max_block_size(size))
        else:
            raise SchemaError(f"unknown constraint '{part}'")
    return constraints[0] if len(constraints) == 1 else all_of(*constraints)


# =============================================================================
# Commands
# =============================================================================
def run_estimate(data: ObservationSet, premetric: PremetricSpec, h: TestFunctionSpec,
                 queries: Sequence[Covariate], alpha: float = 0.05, delta: float = 0.1,
                 include_atoms: bool = False, workers: Optional[int] = None,
                 manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    """Per-query estimate, atom count, squared-error bound and confidence radius."""
    if not queries:
        raise SchemaError("no query covariates given; use --query or --query-grid")
    records = estimate_curve(data, queries, premetric, h, alpha=alpha, delta=delta,
                             include_atoms=include_atoms, workers=workers)
    return {
        'manifest': (manifest or RunManifest('estimate')).to_record(),
        'n_observations': len(data),
        'test_function': h.description,
        'queries': records,
    }


def run_test(data: ObservationSet, premetric: PremetricSpec, statistic: TestStatisticSpec,
             alpha: float, n_samples: int, seed: int, constraint=None,
             settings: Optional[RuntimeSettings] = None,
             manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    """
    Design the partition and run the local randomization test; the exact
    test is used whenever the group fits the enumeration budget.
    """
    settings = settings or RuntimeSettings(workers=default_workers())
    partition = build_partition(data.table, premetric, alpha, constraint)
    report: Dict[str, Any] = {
        'manifest': (manifest or RunManifest('test', seed=seed)).to_record(),
        'n_observations': len(data),
        'matched_pairs': partition.matched_pairs(),
        'n_blocks': len(partition.blocks),
        'group_order': partition.group_order(),
    }
    if partition.group_order() <= settings.enumeration_budget:
        result = exact_test(data, partition, premetric, statistic, alpha, budget=settings.enumeration_budget,
                            chunk_size=settings.chunk_size)
        report['method'] = 'exact'
    else:
        report['method'] = 'subsampled'
        try:
            result = subsampled_test(data, partition, premetric, statistic, alpha, n_samples, seed,
                                     chunk_size=settings.chunk_size, workers=settings.workers)
        except InsufficientSamplesError as e:
            logger.warning(str(e))
            report.update({
                'decision': None,
                'alpha_n': e.alpha_n,
                'n_samples': e.n_samples,
                'required_samples': e.required_samples,
                'penalty': penalty(partition, premetric, data.table),
                'partition': partition.to_record(),
            })
            return report
    report.update(result.to_record())
    report['decision'] = 'reject' if result.reject else 'retain'
    return report


def run_design(covariates: Sequence[Covariate], premetric: PremetricSpec, alpha: float, constraint=None,
               queries: Sequence[Covariate] = (), h_kind: str = INDICATOR,
               manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    """Everything computable before data are collected: partition, penalty, M, N and weight profiles."""
    partition = build_partition(covariates, premetric, alpha, constraint)
    m = group_max(partition, premetric, covariates)
    profiles = []
    for tau in queries:
        b = b_coefficients(h_kind, premetric.distances_to(covariates, tau))
        solution = optimal_weights(b)
        profiles.append({
            'tau': tau.to_record(premetric),
            'M': solution.active_count,
            'weights': solution.weights.tolist(),
            'sq_bound': squared_error_bound(solution.weights, b),
            'ci': confidence_radius(solution.weights, b, alpha),
        })
    return {
        'manifest': (manifest or RunManifest('design')).to_record(),
        'n_covariates': len(covariates),
        'alpha': alpha,
        'partition': partition.to_record(),
        'matched_pairs': partition.matched_pairs(),
        'group_order': partition.group_order(),
        'penalty': penalty(partition, premetric, covariates),
        'M': m,
        'required_samples': required_samples(alpha, m),
        'profiles': profiles,
    }


def run_estimate_premetric(bundle: RealizationBundle, ell: PremetricSpec, t: Covariate, t_prime: Covariate,
                           workers: Optional[int] = None,
                           manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    result = estimate_dsc(bundle, t, t_prime, ell, workers=workers)
    report = result.to_record(ell)
    report['manifest'] = (manifest or RunManifest('estimate-premetric')).to_record()
    return report


def run_simulate(spec: GeneratorSpec, locations: Sequence[float], n_realizations: int,
                 csv_path: Optional[str] = None, workers: Optional[int] = None,
                 manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    """Simulate a multi-realization CSV and describe it."""
    bundle = simulate(spec, locations, n_realizations, workers=workers)
    premetric = matching_premetric(spec)
    schema = DatasetSchema(observation='value', realization='realization')
    if csv_path:
        emit(csv_path, bundle, schema, premetric)
    return {
        'manifest': (manifest or RunManifest('simulate', seed=spec.seed)).to_record(),
        'generator': spec.kind,
        'n_realizations': len(bundle),
        'n_locations': len(locations),
        'alphabet_size': len(bundle.alphabet) if spec.kind != LATENT_GAUSSIAN or spec.quantizer else None,
        'matching_premetric': premetric.to_text(),
        'csv': csv_path,
    }


def run_validate_premetric(premetric: PremetricSpec, sample: Sequence[Covariate], tolerance: float = 0.0,
                           manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    report = validate_premetric(premetric, sample, tolerance).to_record()
    report['manifest'] = (manifest or RunManifest('validate-premetric')).to_record()
    return report


# =============================================================================
# Entry point
# =============================================================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='locex', description='Local exchangeability estimation and testing')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    def common(sub: argparse.ArgumentParser, data: bool = True) -> None:
        if data:
            sub.add_argument('--data', required=True, help='Input CSV (UTF-8, header row)')
        sub.add_argument('--schema', help='INI with [schema], [premetric:*], [test_function], [runtime]')
        sub.add_argument('--premetric', help='INI whose [premetric:*] sections replace those of the schema file')
        sub.add_argument('--out', help='JSON output path (default stdout)')
        sub.add_argument('--log-file', help='Also write logs to this file')
        sub.add_argument('--verbose', action='store_true', help='Log at DEBUG level')

    estimate_cmd = commands.add_parser('estimate', help='Estimate G_tau(h) at query covariates')
    common(estimate_cmd)
    estimate_cmd.add_argument('--alpha', type=float, default=0.05)
    estimate_cmd.add_argument('--delta', type=float, default=0.1)
    estimate_cmd.add_argument('--query', action='append', default=[], help='col=value[,col=value]')
    estimate_cmd.add_argument('--query-grid', action='append', default=[], help='col=start:stop:count[,col=value]')
    estimate_cmd.add_argument('--table', help='Also write the per-query table as CSV')
    estimate_cmd.add_argument('--atoms', action='store_true', help='Include active atoms per query')

    test_cmd = commands.add_parser('test', help='Local randomization test')
    common(test_cmd)
    test_cmd.add_argument('--alpha', type=float, default=0.05)
    test_cmd.add_argument('--n-perms', type=int, default=100000)
    test_cmd.add_argument('--seed', type=int, required=True)
    test_cmd.add_argument('--constraint', default='none', help='none | matched-pairs | max-size:K')

    design_cmd = commands.add_parser('design', help='Pre-data design report')
    common(design_cmd)
    design_cmd.add_argument('--alpha', type=float, default=0.05)
    design_cmd.add_argument('--constraint', default='none')
    design_cmd.add_argument('--query', action='append', default=[])
    design_cmd.add_argument('--query-grid', action='append', default=[])

    dsc_cmd = commands.add_parser('estimate-premetric', help='Estimate d_sc(t, t\') from realizations')
    common(dsc_cmd)
    dsc_cmd.add_argument('--t', required=True, help='col=value[,col=value]')
    dsc_cmd.add_argument('--t-prime', required=True, help='col=value[,col=value]')

    simulate_cmd = commands.add_parser('simulate', help='Write a multi-realization CSV from a generator')
    common(simulate_cmd, data=False)
    simulate_cmd.add_argument('--generator', required=True, help='INI with a [generator] section')
    simulate_cmd.add_argument('--grid', required=True, help='start:stop:count locations')
    simulate_cmd.add_argument('--n-realizations', type=int, required=True)
    simulate_cmd.add_argument('--seed', type=int, required=True)
    simulate_cmd.add_argument('--csv', required=True, help='Output CSV path')

    validate_cmd = commands.add_parser('validate-premetric', help='Check premetric axioms on a covariate sample')
    common(validate_cmd)
    validate_cmd.add_argument('--tolerance', type=float, default=0.0)
    return parser


def configure_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _premetric(config: ConfigParser) -> PremetricSpec:
    return PremetricSpec.from_config(config)


def _manifest(args: argparse.Namespace, schema: Optional[DatasetSchema], premetric: Optional[PremetricSpec],
              seed: Optional[int] = None) -> RunManifest:
    params = {}
    for key in ('alpha', 'delta', 'n_perms', 'constraint', 'query', 'query_grid', 't', 't_prime', 'grid',
                'n_realizations', 'tolerance', 'atoms'):
        if hasattr(args, key):
            params[key] = getattr(args, key)
    return RunManifest(
        command=args.command,
        schema_hash=schema.hash(premetric) if schema is not None else None,
        premetric=premetric.to_text() if premetric is not None else None,
        seed=seed,
        params=params,
    )


def _write_table(path: str, records: Sequence[Dict[str, Any]]) -> None:
    columns = ['estimate', 'M', 'sq_bound', 'tail_bound', 'delta', 'ci', 'alpha']
    tau_columns = list(records[0]['tau']) if records else []
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(tau_columns + columns)
        for record in records:
            row = [record['tau'][c] for c in tau_columns] + [record[c] for c in columns]
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    """Run the parsed command and return its JSON record."""
    config = load_config(args.schema, premetric=args.premetric)
    runtime = RuntimeSettings.from_config(config)

    if args.command == 'simulate':
        spec = GeneratorSpec.from_config(load_config(args.generator)).with_seed(args.seed)
        parts = args.grid.split(':')
        if len(parts) != 3:
            raise SchemaError(f"--grid must be start:stop:count, got '{args.grid}'")
        locations = np.linspace(float(parts[0]), float(parts[1]), int(parts[2])).tolist()
        manifest = _manifest(args, None, matching_premetric(spec), seed=args.seed)
        manifest.params['generator'] = dict(spec.to_config()['generator'])
        return run_simulate(spec, locations, args.n_realizations, args.csv, runtime.workers, manifest)

    premetric = _premetric(config)
    if args.command == 'validate-premetric':
        schema = DatasetSchema(observation=None)
        covariates, _ = ingest_covariates(args.data, schema, premetric)
        return run_validate_premetric(premetric, covariates, args.tolerance, _manifest(args, schema, premetric))

    schema = DatasetSchema.from_config(config)

    if args.command == 'design':
        covariates, labels = ingest_covariates(args.data, schema, premetric)
        flags = labels['group'] == schema.group_value if 'group' in labels else None
        h_kind = config.get('test_function', 'kind', fallback=INDICATOR).strip().lower()
        return run_design(covariates, premetric, args.alpha, parse_constraint(args.constraint, flags),
                          parse_queries(premetric, args.query, args.query_grid), h_kind,
                          _manifest(args, schema, premetric))

    data = ingest(args.data, schema, premetric)

    if args.command == 'estimate-premetric':
        if not isinstance(data, RealizationBundle):
            raise SchemaError("estimate-premetric needs a realization column in the schema")
        t = premetric.covariate_from_mapping(parse_assignments(args.t))
        t_prime = premetric.covariate_from_mapping(parse_assignments(args.t_prime))
        return run_estimate_premetric(data, premetric, t, t_prime, runtime.workers,
                                      _manifest(args, schema, premetric))

    if isinstance(data, RealizationBundle):
        raise SchemaError(f"'{args.command}' takes a single realization; drop the realization column")

    if args.command == 'estimate':
        h = TestFunctionSpec.from_config(config)
        queries = parse_queries(premetric, args.query, args.query_grid)
        report = run_estimate(data, premetric, h, queries, args.alpha, args.delta, args.atoms, runtime.workers,
                              _manifest(args, schema, premetric))
        if args.table:
            _write_table(args.table, report['queries'])
        return report

    # test
    if not schema.group or not schema.outcome_values:
        raise SchemaError("the built-in statistic needs 'group' and 'outcome_values' in [schema]")
    flags = schema.group_flags(data)
    statistic = TestStatisticSpec.diff_conditional_proportions(flags, schema.outcome_values)
    return run_test(data, premetric, statistic, args.alpha, args.n_perms, args.seed,
                    parse_constraint(args.constraint, flags), runtime,
                    _manifest(args, schema, premetric, seed=args.seed))


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main entry point for the locex command-line tool."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.log_file)

    try:
        record = dispatch(args)
    except (LocexError, ValueError) as e:
        logger.error(str(e))
        sys.exit(1)

    text = to_json(record)
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as handle:
            handle.write(text)
        logger.info(f"Wrote {args.command} report to {args.out}")
    else:
        sys.stdout.write(text)

    success = record.get('passed', True) if args.command == 'validate-premetric' else True
    sys.exit(0 if success else 1)


if __name__ == '__main__':
    main()
