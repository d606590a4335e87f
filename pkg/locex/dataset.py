"""
Locex Dataset Module

Typed CSV ingestion and emission. A DatasetSchema names the observation
column, the optional group/outcome columns used by the built-in test
statistic and the optional realization column of multi-realization files;
covariate columns come from the [premetric:*] sections of the same INI.

Usage:
    config = load_config('study.ini')
    schema = DatasetSchema.from_config(config)
    premetric = PremetricSpec.from_config(config)
    data = ingest('records.csv', schema, premetric)
"""

import csv
import hashlib
import io
import logging
import os
from configparser import ConfigParser
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from locex.errors import DataError, SchemaError
from locex.local_empirical import ObservationSet
from locex.premetric import SECTION_PREFIX, Covariate, PremetricSpec
from locex.premetric_estimation import RealizationBundle

logger = logging.getLogger(__name__)

SCHEMA_SECTION = 'schema'
CATEGORICAL = 'categorical'
NUMERIC = 'numeric'
GROUP_LABEL = 'group'


def load_config(*paths: Optional[str], premetric: Optional[str] = None) -> ConfigParser:
    """
    Read one or more INI files into a single ConfigParser; later files win.

    A separate premetric file replaces every [premetric:*] section read from
    the other files instead of adding to them.
    """
    config = ConfigParser()
    for path in paths:
        if path is None:
            continue
        _read(config, path)
    if premetric is not None:
        replaced = [s for s in config.sections() if s.startswith(SECTION_PREFIX)]
        for section in replaced:
            config.remove_section(section)
        if replaced:
            logger.debug(f"Premetric file {premetric} replaces sections {replaced}")
        _read(config, premetric)
    return config


def _read(config: ConfigParser, path: str) -> None:
    if not os.path.exists(path):
        raise SchemaError(f"configuration file not found: {path}")
    config.read(path, encoding='utf-8')


@dataclass(frozen=True)
class DatasetSchema:
    """
    Non-covariate columns of a dataset.

    Args:
        observation: Observation column (None for covariate-only files)
        observation_kind: 'categorical' keeps cells as strings, 'numeric' parses floats
        group: Optional treatment column
        group_value: Cell value marking a treated record
        outcome_values: Observation values counted by the built-in statistic
        realization: Optional realization-id column
    """

    observation: Optional[str] = 'value'
    observation_kind: str = CATEGORICAL
    group: Optional[str] = None
    group_value: str = '1'
    outcome_values: Tuple[str, ...] = ()
    realization: Optional[str] = None

    def __post_init__(self):
        if self.observation_kind not in (CATEGORICAL, NUMERIC):
            raise SchemaError(f"observation_kind must be '{CATEGORICAL}' or '{NUMERIC}', got '{self.observation_kind}'")
        object.__setattr__(self, 'outcome_values', tuple(self.outcome_values))
        names = [c for c in (self.observation, self.group, self.realization) if c]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema columns must be distinct: {names}")

    def columns(self, premetric: PremetricSpec) -> List[str]:
        """Every column the schema references, realization first."""
        names = [self.realization] if self.realization else []
        names.extend(premetric.columns)
        if self.observation:
            names.append(self.observation)
        if self.group:
            names.append(self.group)
        if len(set(names)) != len(names):
            raise SchemaError(f"column names must be unique: {names}")
        return names

    def group_flags(self, data: ObservationSet) -> np.ndarray:
        if not self.group or GROUP_LABEL not in data.labels:
            raise SchemaError("schema declares no group column")
        return np.asarray(data.labels[GROUP_LABEL] == self.group_value, dtype=bool)

    def to_config(self, config: Optional[ConfigParser] = None) -> ConfigParser:
        config = config if config is not None else ConfigParser()
        section: Dict[str, str] = {'observation_kind': self.observation_kind, 'group_value': self.group_value}
        for key in ('observation', 'group', 'realization'):
            if getattr(self, key):
                section[key] = getattr(self, key)
        if self.outcome_values:
            section['outcome_values'] = ', '.join(self.outcome_values)
        config[SCHEMA_SECTION] = section
        return config

    def to_text(self) -> str:
        buffer = io.StringIO()
        self.to_config().write(buffer)
        return buffer.getvalue()

    def hash(self, premetric: Optional[PremetricSpec] = None) -> str:
        """sha256 over the schema and, when given, the covariate columns."""
        text = self.to_text() + (premetric.to_text() if premetric is not None else '')
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    @classmethod
    def from_config(cls, config: ConfigParser) -> 'DatasetSchema':
        if not config.has_section(SCHEMA_SECTION):
            raise SchemaError(f"configuration has no [{SCHEMA_SECTION}] section")
        outcome = config.get(SCHEMA_SECTION, 'outcome_values', fallback='')
        return cls(
            observation=config.get(SCHEMA_SECTION, 'observation', fallback=None),
            observation_kind=config.get(SCHEMA_SECTION, 'observation_kind', fallback=CATEGORICAL).strip().lower(),
            group=config.get(SCHEMA_SECTION, 'group', fallback=None),
            group_value=config.get(SCHEMA_SECTION, 'group_value', fallback='1'),
            outcome_values=tuple(v.strip() for v in outcome.split(',') if v.strip()),
            realization=config.get(SCHEMA_SECTION, 'realization', fallback=None),
        )


@dataclass
class _Rows:
    covariates: List[Covariate] = field(default_factory=list)
    values: List[Any] = field(default_factory=list)
    groups: List[str] = field(default_factory=list)
    realizations: List[str] = field(default_factory=list)


def _read_rows(source: Union[str, TextIO], schema: DatasetSchema, premetric: PremetricSpec,
               require_observation: bool) -> _Rows:
    if isinstance(source, str):
        if not os.path.exists(source):
            raise DataError(f"data file not found: {source}")
        with open(source, newline='', encoding='utf-8') as handle:
            return _read_rows(handle, schema, premetric, require_observation)

    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    required = list(premetric.columns)
    if require_observation and schema.observation:
        required.append(schema.observation)
    for optional in (schema.group, schema.realization):
        if optional:
            required.append(optional)
    for column in required:
        if column not in header:
            raise DataError("declared column is missing from the header", line=1, column=column)

    rows = _Rows()
    for row in reader:
        line = reader.line_num
        numeric = []
        for term in premetric.numeric:
            cell = row[term.column]
            try:
                numeric.append(float(cell))
            except (TypeError, ValueError):
                raise DataError(f"cannot parse {cell!r} as a number", line=line, column=term.column) from None
            if not np.isfinite(numeric[-1]):
                raise DataError(f"non-finite value {cell!r}", line=line, column=term.column)
        categorical = []
        for term in premetric.categorical:
            if row[term.column] is None:
                raise DataError("row is missing this cell", line=line, column=term.column)
            categorical.append(row[term.column])
        rows.covariates.append(premetric.make_covariate(categorical, numeric))

        if require_observation and schema.observation:
            cell = row[schema.observation]
            if cell is None:
                raise DataError("row is missing this cell", line=line, column=schema.observation)
            if schema.observation_kind == NUMERIC:
                try:
                    rows.values.append(float(cell))
                except ValueError:
                    raise DataError(f"cannot parse {cell!r} as a number", line=line,
                                    column=schema.observation) from None
            else:
                rows.values.append(cell)
        if schema.group:
            rows.groups.append(row[schema.group])
        if schema.realization:
            rows.realizations.append(row[schema.realization])

    if not rows.covariates:
        raise DataError("data file has no records")
    return rows


def ingest(source: Union[str, TextIO], schema: DatasetSchema,
           premetric: PremetricSpec) -> Union[ObservationSet, RealizationBundle]:
    """
    Read a CSV into typed records.

    Args:
        source: Path or open text stream, UTF-8 with a header row
        schema: Dataset schema
        premetric: Premetric whose columns are the covariates

    Returns:
        ObservationSet, or a RealizationBundle when the schema names a
        realization column (realizations in order of first appearance)
    """
    if not schema.observation:
        raise SchemaError("schema declares no observation column")
    rows = _read_rows(source, schema, premetric, require_observation=True)
    labels = {GROUP_LABEL: rows.groups} if schema.group else {}

    if not schema.realization:
        data = ObservationSet(rows.covariates, rows.values, labels)
        logger.info(f"Ingested {len(data)} records")
        return data

    order: Dict[str, List[int]] = {}
    for i, rid in enumerate(rows.realizations):
        order.setdefault(rid, []).append(i)
    full = ObservationSet(rows.covariates, rows.values, labels)
    bundle = RealizationBundle([full.take(indices) for indices in order.values()], ids=list(order))
    logger.info(f"Ingested {len(full)} records in {len(bundle)} realizations")
    return bundle


def ingest_covariates(source: Union[str, TextIO], schema: DatasetSchema,
                      premetric: PremetricSpec) -> Tuple[List[Covariate], Dict[str, np.ndarray]]:
    """Covariates (and group labels) of a file that may lack observations."""
    rows = _read_rows(source, schema, premetric, require_observation=False)
    labels = {GROUP_LABEL: np.asarray(rows.groups)} if schema.group else {}
    return rows.covariates, labels


def _cell(value: Any) -> str:
    if isinstance(value, (np.generic,)):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit(target: Union[str, TextIO], data: Union[ObservationSet, RealizationBundle],
         schema: DatasetSchema, premetric: PremetricSpec) -> None:
    """
    Write records as CSV in the schema's column order, floats via repr so
    that ingest(emit(...)) reproduces them exactly.
    """
    if isinstance(target, str):
        with open(target, 'w', newline='', encoding='utf-8') as handle:
            emit(handle, data, schema, premetric)
        return

    if isinstance(data, RealizationBundle):
        if not schema.realization:
            raise SchemaError("schema needs a realization column to emit a bundle")
        parts: Sequence[Tuple[Any, ObservationSet]] = list(zip(data.ids, data.realizations))
    else:
        parts = [(None, data)]

    writer = csv.writer(target, lineterminator='\n')
    writer.writerow(schema.columns(premetric))
    for rid, observations in parts:
        groups = observations.labels.get(GROUP_LABEL)
        for i, covariate in enumerate(observations.covariates):
            row = [_cell(rid)] if schema.realization else []
            row.extend(_cell(v) for v in covariate.categorical)
            row.extend(_cell(v) for v in covariate.numeric)
            if schema.observation:
                row.append(_cell(observations.values[i]))
            if schema.group:
                row.append(_cell(groups[i]) if groups is not None else '')
            writer.writerow(row)
