"""Seeded experiment sweeps and their CSV tables.

    An `ExperimentSpec` names a model, a corpus and the sweep axes. Every grid
    point (the cartesian product of the axes, in the fixed order of
    `GRID_COLUMNS`) is run once per seed: FedAttn is executed, compared with
    the centralized forward and its costs are recorded.

    `run_experiment` writes

    + `runs.csv`: one row per grid point and seed.
    + `summary.csv`: one row per grid point with mean/min/max over the seeds.

    `emit_bounds` writes

    + `bounds.csv`: measured deviation beside the error bounds, one row per run.
    + `bound_blocks.csv`: the per block gains and reductions of every run.

    Grid points may run on a thread pool; rows are always written in grid order
    so identical specs give byte identical files.
"""
import csv
import json
import logging
import math
import os

from contextvars import copy_context
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pydantic import BaseModel, Field, validator

from pyfedattn.analysis import (
    BOUND_COLUMNS,
    bound_rows,
    check_recursion,
    corollary1_bound,
    gain_table,
    gamma_reduction,
    theorem1_bound,
    theorem3_bound,
)
from pyfedattn.base import Operation, Classification, InfoClassification
from pyfedattn.cost import comm_bits, cost_report
from pyfedattn.environment import default_out_dir, default_threads, default_wire_bits
from pyfedattn.errors import (
    ConfigError,
    ExitCode,
    FedAttnError,
    FedAttnErrorHandler,
    FedAttnErrorWithReturn,
    ScheduleError,
    StdFedAttnError,
)
from pyfedattn.falogging import FedAttnLogger, get_logger
from pyfedattn.model import ModelConfig, ModelWeights, embed_tokens, init_weights
from pyfedattn.oracle import CenTrace, DeviationReport, cen_decode, measure_sigma, run_cenattn
from pyfedattn.partition import CorpusParams, Partition, Strategy, SyntheticCorpus, gather, gen_corpus, make_partition
from pyfedattn.protocol import (
    FedOptions,
    RunTrace,
    ScheduleKind,
    SyncSchedule,
    decode_greedy,
    empty_schedule,
    named_schedule,
    participant_map,
    publisher_schedule,
    run_fedattn,
    uniform_schedule,
)
from pyfedattn.transport import Topology
from pyfedattn.utils import parse_config, render_env_string

UNIFORM = 'uniform'
LOCAL = 'local'
"""No synchronization at all."""

GRID_COLUMNS = ['strategy', 'N', 'H', 'schedule', 'local_token_ratio', 'kv_exchange_ratio', 'publisher_H']

RUN_COLUMNS = GRID_COLUMNS + [
    'seed', 'status', 'L', 'sync_blocks',
    'deviation', 'participant_dev_mean', 'participant_dev_min', 'participant_dev_max', 'decode_agreement',
    'bits_sent_total', 'bits_per_participant', 'relay_bits', 'handoff_bits',
    'prefill_flops_mean', 'prefill_flops_max', 'decode_flops_per_step',
    'peak_scalars_mean', 'peak_scalars_max', 'sigma_profile'
]

SUMMARY_METRICS = ['deviation', 'decode_agreement', 'bits_per_participant', 'prefill_flops_mean', 'peak_scalars_mean']

SUMMARY_COLUMNS = GRID_COLUMNS + ['seeds', 'failed'] + [
    f'{metric}_{stat}' for metric in SUMMARY_METRICS for stat in ('mean', 'min', 'max')
]

BOUNDS_COLUMNS = GRID_COLUMNS + [
    'seed', 'status', 'measured', 'chained', 'theorem1', 'corollary1', 'theorem3',
    'recursion_ok', 'min_slack', 'Gamma_profile'
]

BOUND_BLOCK_COLUMNS = GRID_COLUMNS + ['seed'] + BOUND_COLUMNS

OK = 'ok'


class Metric(str, Enum):
    DEVIATION = 'deviation'
    DECODE = 'decode'
    COST = 'cost'
    SIGMA = 'sigma'


def _nonempty(v: List[Any]) -> List[Any]:
    if not v:
        raise ValueError('axis must not be empty')
    return v


class SweepAxes(BaseModel):
    """Values of every sweep axis; each list must hold at least one value."""

    H: List[int] = [1]
    """Local forwards per round; named schedules use `M // H` rounds."""
    N: List[int] = [4]
    schedule: List[str] = [UNIFORM]
    """`uniform`, `local` or a `ScheduleKind`."""
    local_token_ratio: List[float] = [1.0]
    kv_exchange_ratio: List[float] = [1.0]
    publisher_H: List[Optional[int]] = [None]
    """Publisher sync interval of adaptive aggregation, `None` for none."""

    @validator('*')
    def _check_nonempty(cls, v):
        return _nonempty(v)

    @validator('H', 'N', each_item=True)
    def _positive(cls, v):
        if v < 1:
            raise ValueError('must be at least 1')
        return v

    @validator('publisher_H', each_item=True)
    def _positive_or_none(cls, v):
        if v is not None and v < 1:
            raise ValueError('must be at least 1')
        return v

    @validator('local_token_ratio', each_item=True)
    def _ratio(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError('ratio must be in (0, 1]')
        return v

    @validator('kv_exchange_ratio', each_item=True)
    def _kv_ratio(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError('ratio must be in [0, 1]')
        return v

    @validator('schedule', each_item=True)
    def _schedule(cls, v):
        if v in (UNIFORM, LOCAL):
            return v
        try:
            return ScheduleKind(v).value
        except ValueError:
            raise ValueError(f'unknown schedule {v!r}')

    class Config:
        allow_mutation = False
        extra = 'forbid'


class ExperimentSpec(BaseModel):
    """A JSON experiment description."""

    name: str = 'fedattn'
    model: ModelConfig = ModelConfig()
    corpus: CorpusParams = CorpusParams()
    strategies: List[Strategy] = [Strategy.TokSeg_QAg]
    sweep: SweepAxes = SweepAxes()
    seeds: List[int] = list(range(10))
    max_new: int = Field(16, ge=1)
    """Tokens decoded by the publisher and by the centralized reference."""
    metrics: List[Metric] = list(Metric)
    out: str = Field(default_factory=default_out_dir)
    """Output directory, `{ENV_VAR}` segments are rendered from the environment."""
    wire_bits: int = Field(default_factory=default_wire_bits, ge=1, le=255)
    topology: Topology = Topology.ALL_TO_ALL
    block_diagonal: bool = False
    threads: int = Field(default_factory=default_threads, ge=1)
    """Grid points run concurrently."""

    @validator('strategies', pre=True, each_item=True)
    def _strategy(cls, v):
        if isinstance(v, Strategy):
            return v
        try:
            return Strategy.parse(str(v))
        except ConfigError as e:
            raise ValueError(e.message)

    @validator('strategies', 'seeds', 'metrics')
    def _check_nonempty(cls, v):
        return _nonempty(v)

    @validator('seeds', each_item=True)
    def _seed(cls, v):
        if v < 0:
            raise ValueError('seeds must be nonnegative')
        return v

    def output_dir(self) -> str:
        return render_env_string(self.out)

    class Config:
        allow_mutation = False
        extra = 'forbid'


def load_spec(path: str, **overrides: Any) -> ExperimentSpec:
    """ Reads an `ExperimentSpec` from a JSON file.

        *overrides* replace top level fields (`seeds`, `out`, `threads`) and are
        validated with the rest of the file.

        Raises:
            ConfigError: File unreadable, not JSON or an invalid field.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f'Can not read {path}: {e.strerror}', details={'field': path})
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path} is not valid JSON: {e.msg}', details={'field': path, 'line': e.lineno})

    if not isinstance(data, dict):
        raise ConfigError(f'{path} must hold a JSON object', details={'field': path})

    data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(ExperimentSpec, data)


class GridPoint(NamedTuple):
    strategy: Strategy
    N: int
    H: int
    schedule: str
    local_token_ratio: float
    kv_exchange_ratio: float
    publisher_H: Optional[int]

    def columns(self) -> Dict[str, Any]:
        return {
            'strategy': self.strategy.value,
            'N': self.N,
            'H': self.H,
            'schedule': self.schedule,
            'local_token_ratio': self.local_token_ratio,
            'kv_exchange_ratio': self.kv_exchange_ratio,
            'publisher_H': '' if self.publisher_H is None else self.publisher_H
        }


def grid(spec: ExperimentSpec) -> List[GridPoint]:
    """Every combination of the sweep axes, the first axis varying slowest."""
    s = spec.sweep
    return [
        GridPoint(*values)
        for values in product(
            spec.strategies, s.N, s.H, s.schedule, s.local_token_ratio, s.kv_exchange_ratio, s.publisher_H)
    ]


def build_schedule(M: int, point: GridPoint) -> Tuple[SyncSchedule, Optional[Dict[int, List[int]]]]:
    """The run schedule of *point* and the per participant overrides of adaptive aggregation."""
    if point.publisher_H is not None:
        if point.schedule != UNIFORM:
            raise ScheduleError(
                'A publisher interval needs the uniform schedule',
                details={'field': 'sweep.publisher_H', 'schedule': point.schedule}
            )
        return publisher_schedule(M, point.H, point.publisher_H, point.N - 1, point.N)

    if point.schedule == UNIFORM:
        return uniform_schedule(M, point.H), None

    if point.schedule == LOCAL:
        return empty_schedule(M), None

    return named_schedule(ScheduleKind(point.schedule), M, M // point.H), None


@dataclass(eq=False)
class RunArtifacts:
    """Everything one (grid point, seed) execution produced."""
    weights: ModelWeights
    corpus: SyntheticCorpus
    partition: Partition
    schedule: SyncSchedule
    trace: RunTrace
    cen: Optional[CenTrace] = None
    report: Optional[DeviationReport] = None


def execute(
        spec: ExperimentSpec,
        point: GridPoint,
        seed: int,
        reference: bool = True,
        logger: Optional[FedAttnLogger] = None) -> RunArtifacts:
    """ Runs FedAttn for one grid point and seed.

        The model and the corpus are both seeded by *seed*. With *reference*
        the centralized forward over every token and the deviation report are
        computed as well. With sparse local attention the reference still sees
        the full prompt, so the tokens dropped show up as deviation.
    """
    logger = logger or get_logger()

    weights = init_weights(spec.model.copy(update={'seed': seed}))
    corpus = gen_corpus(
        spec.corpus.shots, (spec.corpus.unit_len_min, spec.corpus.unit_len_max), spec.model.vocab, seed)
    p = make_partition(corpus, point.N, point.strategy)

    sched, overrides = build_schedule(spec.model.M, point)
    opts = FedOptions(
        local_token_ratio=point.local_token_ratio,
        kv_exchange_ratio=point.kv_exchange_ratio,
        per_participant_schedules=overrides,
        wire_bits=spec.wire_bits,
        seed=seed,
        block_diagonal=spec.block_diagonal,
        topology=spec.topology,
        threads=1
    )

    x = embed_tokens(corpus.tokens, range(corpus.L), weights)
    trace = run_fedattn([gather(x, p, n) for n in range(p.N)], weights, p, sched, opts, logger)

    artifacts = RunArtifacts(weights=weights, corpus=corpus, partition=p, schedule=sched, trace=trace)
    if reference:
        owners = p.assign if spec.block_diagonal else None
        artifacts.cen = run_cenattn(x, weights, owner=owners, logger=logger)
        artifacts.report = measure_sigma(weights, trace, p, artifacts.cen, logger)

    return artifacts


def _profile(values: Sequence[float]) -> str:
    return ';'.join(repr(float(v)) for v in values)


def decode_agreement(artifacts: RunArtifacts, max_new: int, logger: Optional[FedAttnLogger] = None) -> float:
    """Share of the publisher's greedy tokens equal to the centralized decode."""
    p = artifacts.partition
    fed = decode_greedy(artifacts.trace, artifacts.weights, p, max_new, logger)
    cen = cen_decode(artifacts.cen, artifacts.weights, max_new, start_pos=p.L).tokens

    return sum(1 for a, b in zip(fed, cen) if a == b) / max_new


def _run_row(spec: ExperimentSpec, point: GridPoint, seed: int, logger: FedAttnLogger) -> Dict[str, Any]:
    metrics = set(spec.metrics)
    art = execute(spec, point, seed, reference=bool(metrics - {Metric.COST}), logger=logger)
    trace, p = art.trace, art.partition

    row: Dict[str, Any] = {c: '' for c in RUN_COLUMNS}
    row.update(point.columns())
    row.update({
        'seed': seed,
        'status': OK,
        'L': p.L,
        'sync_blocks': ';'.join(str(m) for m in trace.schedule.sync_blocks),
    })

    if Metric.DEVIATION in metrics:
        final = art.report.participant_dev[-1]
        row.update({
            'deviation': float(art.report.state_dev[-1]),
            'participant_dev_mean': float(np.mean(final)),
            'participant_dev_min': float(np.min(final)),
            'participant_dev_max': float(np.max(final)),
        })

    if Metric.DECODE in metrics:
        row['decode_agreement'] = decode_agreement(art, spec.max_new, logger)

    if Metric.SIGMA in metrics:
        row['sigma_profile'] = _profile(art.report.sigma_sum(m) for m in range(1, trace.M + 1))

    if Metric.COST in metrics:
        predicted = comm_bits(p, art.schedule, trace.options, spec.model)
        if predicted.bits_sent != trace.bits_sent:
            raise StdFedAttnError(
                'Predicted bits differ from the message log',
                details={'predicted': predicted.bits_sent, 'log': trace.bits_sent}
            )

        costs = cost_report(trace, spec.model, art.schedule)
        decode = next(r.decode_flops_per_step for r in costs.rows if r.participant == p.publisher)
        row.update({
            'bits_sent_total': sum(trace.bits_sent),
            'bits_per_participant': costs.mean('bits_sent'),
            'relay_bits': trace.relay_bits,
            'handoff_bits': trace.handoff_bits,
            'prefill_flops_mean': costs.mean('prefill_flops'),
            'prefill_flops_max': max(trace.flops_prefill),
            'decode_flops_per_step': decode,
            'peak_scalars_mean': costs.mean('peak_scalars'),
            'peak_scalars_max': max(r.peak_scalars for r in costs.rows),
        })

    return row


def _failed(columns: Sequence[str], point: GridPoint, seed: int, err: FedAttnError) -> Dict[str, Any]:
    row: Dict[str, Any] = {c: '' for c in columns}
    row.update(point.columns())
    row.update({'seed': seed, 'status': f'error:{err.code.name}'})
    return row


def _guarded(
        errors: FedAttnErrorHandler,
        columns: Sequence[str],
        fn: Callable[[GridPoint, int], Dict[str, Any]]) -> Callable[[Tuple[GridPoint, int]], Any]:
    """ Wraps *fn* so a failing run becomes an error row and the sweep goes on.

        The error is collected with its code, the highest one decides the
        process exit code.
    """
    @errors.collect
    def run(item: Tuple[GridPoint, int]) -> Any:
        point, seed = item
        try:
            return fn(point, seed)
        except FedAttnError as e:
            if e.code == ExitCode.INTERNAL:
                raise

            raise FedAttnErrorWithReturn(
                message=f'{point.columns()} seed {seed}: {e.message}',
                return_value=_failed(columns, point, seed, e),
                code=e.code,
                details=e.details
            )

    return run


def _sweep(spec: ExperimentSpec, run: Callable[[Tuple[GridPoint, int]], Any]) -> List[Any]:
    """Runs every (grid point, seed) pair, results in grid order."""
    items = [(point, seed) for point in grid(spec) for seed in spec.seeds]
    context = copy_context()

    with participant_map(spec.threads) as pmap:
        return pmap(lambda i: context.copy().run(run, items[i]), range(len(items)))


def _write_csv(path: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _stats(values: Sequence[float]) -> Tuple[float, float, float]:
    lo, hi = min(values), max(values)
    # rounding of the sum may leave the mean just outside [lo, hi]
    mean = min(max(math.fsum(values) / len(values), lo), hi)
    return mean, lo, hi


def summarize(spec: ExperimentSpec, rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """One summary row per grid point over its successful seeds."""
    out = []
    per_point = len(spec.seeds)

    for i, point in enumerate(grid(spec)):
        chunk = rows[i * per_point:(i + 1) * per_point]
        ok = [r for r in chunk if r['status'] == OK]

        summary: Dict[str, Any] = {c: '' for c in SUMMARY_COLUMNS}
        summary.update(point.columns())
        summary.update({'seeds': len(ok), 'failed': len(chunk) - len(ok)})

        for metric in SUMMARY_METRICS:
            values = [float(r[metric]) for r in ok if r[metric] != '']
            if values:
                mean, lo, hi = _stats(values)
                summary.update({f'{metric}_mean': mean, f'{metric}_min': lo, f'{metric}_max': hi})

        out.append(summary)

    return out


@dataclass
class ExperimentResult:
    rows: List[Dict[str, Any]]
    summary: List[Dict[str, Any]] = field(default_factory=list)
    files: List[str] = field(default_factory=list)
    highest: Optional[FedAttnError] = None
    """Collected error with the highest code, `None` when every run succeeded."""

    @property
    def exit_code(self) -> ExitCode:
        return ExitCode.OK if self.highest is None else self.highest.code


def _output_dir(spec: ExperimentSpec, out: Optional[str]) -> str:
    path = render_env_string(out) if out else spec.output_dir()
    os.makedirs(path, exist_ok=True)
    return path


def run_experiment(
        spec: ExperimentSpec,
        out: Optional[str] = None,
        logger: Optional[FedAttnLogger] = None) -> ExperimentResult:
    """ Runs every grid point and seed of *spec* and writes `runs.csv` and `summary.csv`.

        Args:
            spec:   The experiment, a validated `ExperimentSpec` or its dict form.
            out:    Output directory overriding `spec.out`.

        Raises:
            ConfigError: *spec* is invalid.
    """
    spec = parse_config(ExperimentSpec, spec)
    logger = logger or get_logger()
    errors = FedAttnErrorHandler(logger=logger)

    @logger.method(operation='grid-point', out_level=logging.DEBUG, log_return=False)
    def run_point(point: GridPoint, seed: int) -> Dict[str, Any]:
        return _run_row(spec, point, seed, logger)

    @errors.collect(root=True)
    def sweep() -> ExperimentResult:
        run = _guarded(errors, RUN_COLUMNS, run_point)
        rows = _sweep(spec, run)
        return ExperimentResult(rows=rows, summary=summarize(spec, rows), highest=errors.collector().get_highest())

    path = _output_dir(spec, out)
    logger.info({
        Operation: 'run-experiment',
        'name': spec.name,
        'points': len(grid(spec)),
        'seeds': len(spec.seeds),
        'out': path,
        Classification: InfoClassification.SHARED
    })

    result = sweep()
    result.files = [os.path.join(path, 'runs.csv'), os.path.join(path, 'summary.csv')]

    _write_csv(result.files[0], RUN_COLUMNS, result.rows)
    _write_csv(result.files[1], SUMMARY_COLUMNS, result.summary)

    return result


def _bounds_applicable(point: GridPoint) -> Tuple[bool, bool]:
    """ `(uniform, dense)`: whether the closed form bounds apply to *point*.

        Dense means every participant attends to all keys at every
        synchronization block.
    """
    dense = point.kv_exchange_ratio == 1.0 and point.publisher_H is None
    return point.schedule == UNIFORM, dense


def _bound_rows(
        spec: ExperimentSpec,
        point: GridPoint,
        seed: int,
        logger: FedAttnLogger) -> Optional[Tuple[Dict[str, Any], List[Dict[str, Any]]]]:
    if point.local_token_ratio < 1.0:
        logger.info({
            Operation: 'emit-bounds',
            'skipped': point.columns(),
            'seed': seed,
            'reason': 'sparse local attention',
            Classification: InfoClassification.SHARED
        })
        return None

    art = execute(spec, point, seed, reference=True, logger=logger)
    trace, M = art.trace, spec.model.M

    gains = gain_table(art.weights, trace, art.partition, art.cen, art.report)
    recursion = check_recursion(trace, art.cen, gains, logger=logger)
    uniform, dense = _bounds_applicable(point)

    row: Dict[str, Any] = {c: '' for c in BOUNDS_COLUMNS}
    row.update(point.columns())
    row.update({
        'seed': seed,
        'status': OK,
        'measured': recursion.measured,
        'chained': recursion.chained,
        'recursion_ok': recursion.ok,
        'min_slack': recursion.min_slack,
        'Gamma_profile': _profile(gamma_reduction(gains, m, M) for m in range(1, M + 1)),
    })

    if dense:
        row['theorem3'] = theorem3_bound(gains, trace.schedule)
    if dense and uniform:
        theta, rho, sigma = gains.maxima()
        row['theorem1'] = theorem1_bound(gains, point.H, M // point.H)
        row['corollary1'] = corollary1_bound(theta, rho, sigma, point.H, M)

    blocks = []
    for b in bound_rows(gains, trace.schedule):
        block = dict(point.columns(), seed=seed)
        block.update({c: getattr(b, c) for c in BOUND_COLUMNS})
        blocks.append(block)

    return row, blocks


def emit_bounds(
        spec: ExperimentSpec,
        out: Optional[str] = None,
        logger: Optional[FedAttnLogger] = None) -> ExperimentResult:
    """ Evaluates the error bounds of every run and writes `bounds.csv` and `bound_blocks.csv`.

        Runs with sparse local attention have no bounds; they are skipped with a
        log record. The closed form bounds are left empty where they do not
        apply: `theorem1`/`corollary1` need a uniform schedule and dense
        exchange, `theorem3` dense exchange.
    """
    spec = parse_config(ExperimentSpec, spec)
    logger = logger or get_logger()
    errors = FedAttnErrorHandler(logger=logger)

    @logger.method(operation='grid-point', out_level=logging.DEBUG, log_return=False)
    def bound_point(point: GridPoint, seed: int) -> Any:
        return _bound_rows(spec, point, seed, logger)

    @errors.collect(root=True)
    def sweep() -> Tuple[List[Any], Optional[FedAttnError]]:
        run = _guarded(errors, BOUNDS_COLUMNS, bound_point)
        return _sweep(spec, run), errors.collector().get_highest()

    path = _output_dir(spec, out)
    logger.info({
        Operation: 'emit-bounds',
        'name': spec.name,
        'points': len(grid(spec)),
        'out': path,
        Classification: InfoClassification.SHARED
    })

    results, highest = sweep()

    rows: List[Dict[str, Any]] = []
    blocks: List[Dict[str, Any]] = []
    for result in results:
        if result is None:
            continue
        if isinstance(result, tuple):
            rows.append(result[0])
            blocks.extend(result[1])
        else:
            rows.append(result)

    files = [os.path.join(path, 'bounds.csv'), os.path.join(path, 'bound_blocks.csv')]
    _write_csv(files[0], BOUNDS_COLUMNS, rows)
    _write_csv(files[1], BOUND_BLOCK_COLUMNS, blocks)

    return ExperimentResult(rows=rows, files=files, highest=highest)


def iter_rows(path: str) -> Iterator[Dict[str, str]]:
    """Reads back a CSV written by this module."""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        yield from csv.DictReader(f)
