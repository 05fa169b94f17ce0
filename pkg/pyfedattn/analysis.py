"""Error bounds of FedAttn evaluated with realized quantities.

    The supremum constants of the Lipschitz and bounded-deviation assumptions
    can not be computed. Every inequality of the error chain does however hold
    step by step for the ratios a run actually realizes, so the evaluators here
    take a `GainTable` measured along a trajectory:

    + `rho[m-1]`: ratio of the global attention sub-layer at block `m`,
      `|A(X) - A(Y)| / |X - Y|` for the FedAttn state `X` and centralized state `Y`.
    + `theta[m-1]`: ratio of the FFN sub-layer on the inputs both runs fed it.
    + `sigma[m-1, n]`: local-vs-global attention gap of participant `n`.

    Blocks are 1-based throughout; block `m` of a uniform schedule sits at
    `m = H * t + h` with `t` in `0..T-1` and `h` in `1..H`.

    Per block the state deviation obeys

        D_m <= (1 + theta_m) * ((1 + rho_m) * D_{m-1} + inj_m)

    where `inj_m` is the summed sigma at a local block and the realized gap of
    the used attention output at a synchronization block.
"""
import csv

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from pyfedattn.base import Operation, Classification, InfoClassification
from pyfedattn.errors import IncompleteTableError, ScheduleError, ShapeError
from pyfedattn.falogging import FedAttnLogger, get_logger
from pyfedattn.model import ModelWeights, ffn
from pyfedattn.numkernel import Mat, as_mat, frob_dist
from pyfedattn.oracle import CenTrace, DeviationReport, global_attention, round_position
from pyfedattn.partition import Partition
from pyfedattn.protocol import RunTrace, SyncSchedule

BOUND_COLUMNS = ['m', 'sigma_sum', 'theta', 'rho', 'gamma_m', 'Gamma_m', 'cumulative_bound']


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0.0 else num / den


def realized_gains(
        weights: ModelWeights,
        x_fed: Mat,
        x_cen: Mat,
        block: int,
        attn_fed: Optional[Mat] = None,
        positions: Optional[Sequence[int]] = None,
        owners: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """ `(rho, theta)` realized by block *block* (1-based) between two states.

        `rho` compares the global attention sub-layer on both states. `theta`
        compares the FFN sub-layer on its actual inputs: `x_fed + attn_fed`
        (the attention output FedAttn used, the global one when not given)
        against `x_cen + A(x_cen)`. A zero denominator gives a zero ratio.
    """
    x_fed = as_mat(x_fed, 'x_fed')
    x_cen = as_mat(x_cen, 'x_cen')
    if x_fed.shape != x_cen.shape:
        raise ShapeError('States differ in shape', details={'x_fed': list(x_fed.shape), 'x_cen': list(x_cen.shape)})

    positions = np.arange(x_fed.shape[0]) if positions is None else np.asarray(positions)
    params = weights.blocks[block - 1]
    eps = weights.config.eps

    a_fed = global_attention(weights, x_fed, positions, block, owners)
    a_cen = global_attention(weights, x_cen, positions, block, owners)

    rho = _ratio(frob_dist(a_fed, a_cen), frob_dist(x_fed, x_cen))

    z_fed = x_fed + (a_fed if attn_fed is None else as_mat(attn_fed, 'attn_fed'))
    z_cen = x_cen + a_cen
    theta = _ratio(frob_dist(ffn(z_fed, params, eps), ffn(z_cen, params, eps)), frob_dist(z_fed, z_cen))

    return rho, theta


@dataclass(frozen=True, eq=False)
class GainTable:
    """Realized per block gains, see the module documentation."""
    rho: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    attn_dev: Optional[np.ndarray] = None
    """Realized gap of the used attention output, needed by `check_recursion`."""

    def __post_init__(self):
        for name in ('rho', 'theta', 'sigma'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

        if self.sigma.ndim != 2 or self.rho.shape != (self.M,) or self.theta.shape != (self.M,):
            raise IncompleteTableError(
                'Gain table arrays do not cover the same blocks',
                details={'rho': list(self.rho.shape), 'theta': list(self.theta.shape), 'sigma': list(self.sigma.shape)}
            )

        for name in ('rho', 'theta', 'sigma'):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise IncompleteTableError(f'Gain table {name} must be finite and nonnegative', details={'field': name})

    @property
    def M(self) -> int:
        return self.sigma.shape[0]

    @property
    def N(self) -> int:
        return self.sigma.shape[1]

    def gamma(self, m: int) -> float:
        """Lipschitz gain `(1 + theta_m)(1 + rho_m)` of block *m*."""
        return (1.0 + self.theta[m - 1]) * (1.0 + self.rho[m - 1])

    def sigma_sum(self, m: int) -> float:
        return float(np.sum(self.sigma[m - 1, :]))

    def injection(self, m: int) -> float:
        """`(1 + theta_m) * sum_n sigma_n^m`."""
        return (1.0 + self.theta[m - 1]) * self.sigma_sum(m)

    def amplification(self, first: int, last: int) -> float:
        """Product of the gains of blocks `first..last`, 1 when empty."""
        out = 1.0
        for i in range(first, last + 1):
            out *= self.gamma(i)
        return out

    def maxima(self) -> Tuple[float, float, float]:
        """`(theta, rho, sum_n max_m sigma_n^m)`, the uniform constants dominating the table."""
        return float(np.max(self.theta)), float(np.max(self.rho)), float(np.sum(np.max(self.sigma, axis=0)))

    @classmethod
    def uniform(cls, M: int, N: int, theta: float, rho: float, sigma: float) -> 'GainTable':
        return cls(rho=np.full(M, rho), theta=np.full(M, theta), sigma=np.full((M, N), sigma))

    def dict(self) -> Dict[str, Any]:
        return {
            'rho': self.rho.tolist(),
            'theta': self.theta.tolist(),
            'sigma': self.sigma.tolist(),
            'attn_dev': None if self.attn_dev is None else self.attn_dev.tolist()
        }


def _check_sparse(trace: RunTrace) -> None:
    if trace.options.local_token_ratio < 1.0:
        raise IncompleteTableError(
            'Bounds are defined for runs keeping every token',
            details={'local_token_ratio': trace.options.local_token_ratio}
        )


def gain_table(
        weights: ModelWeights,
        trace: RunTrace,
        p: Partition,
        cen: CenTrace,
        report: DeviationReport) -> GainTable:
    """Measures the realized gains of every block of *trace* against *cen*."""
    _check_sparse(trace)

    surviving = trace.surviving
    rows = cen.rows(surviving)
    owners = p.assign[surviving] if trace.options.block_diagonal else None

    rho = np.zeros(trace.M)
    theta = np.zeros(trace.M)

    for m in range(1, trace.M + 1):
        rho[m - 1], theta[m - 1] = realized_gains(
            weights,
            trace.global_state(m - 1),
            cen.states[m - 1][rows, :],
            m,
            attn_fed=trace.global_attn(m),
            positions=surviving,
            owners=owners
        )

    return GainTable(rho=rho, theta=theta, sigma=report.sigma, attn_dev=report.attn_dev)


@dataclass(frozen=True)
class StepVerdict:
    """One link of the error chain: `lhs <= rhs` up to the tolerance."""
    m: int
    t: int
    h: int
    sync: bool
    lhs: float
    rhs: float
    slack: float
    ok: bool


@dataclass(frozen=True)
class RecursionReport:
    steps: List[StepVerdict]
    measured: float
    """Final state deviation."""
    chained: float
    """The per block inequalities chained from block 1 to M."""
    chained_ok: bool
    chain: List[float] = field(default_factory=list)
    """Chained bound after every block."""

    @property
    def ok(self) -> bool:
        return self.chained_ok and all(s.ok for s in self.steps)

    @property
    def min_slack(self) -> float:
        return min((s.slack for s in self.steps), default=0.0)


def check_recursion(
        trace: RunTrace,
        cen: CenTrace,
        gains: GainTable,
        tolerance: float = 1e-9,
        relative: float = 1e-6,
        logger: Optional[FedAttnLogger] = None) -> RecursionReport:
    """ Verifies every per block inequality of the error chain on a run.

        At a local block the injected deviation is `sum_n sigma_n^m`, at a
        synchronization block the realized gap of the attention output used
        (zero for a dense exchange, which leaves the pure amplification step).

        Raises:
            IncompleteTableError: When *gains* does not cover the trace.
    """
    logger = logger or get_logger()
    _check_sparse(trace)

    if gains.M != trace.M or gains.N != trace.N:
        raise IncompleteTableError(
            'Gain table does not cover the trace',
            details={'table': [gains.M, gains.N], 'trace': [trace.M, trace.N]}
        )
    if gains.attn_dev is None or len(gains.attn_dev) != trace.M:
        raise IncompleteTableError('Gain table lacks the realized attention gaps', details={'M': trace.M})

    rows = cen.rows(trace.surviving)
    dev = [frob_dist(trace.global_state(m), cen.states[m][rows, :]) for m in range(trace.M + 1)]

    steps: List[StepVerdict] = []
    chain = [dev[0]]

    for m in range(1, trace.M + 1):
        sync = trace.schedule.is_sync(m)
        inj = float(gains.attn_dev[m - 1]) if sync else gains.sigma_sum(m)
        theta, rho = gains.theta[m - 1], gains.rho[m - 1]

        rhs = (1.0 + theta) * ((1.0 + rho) * dev[m - 1] + inj)
        slack = rhs - dev[m]
        t, h = round_position(trace.schedule, m)

        steps.append(StepVerdict(
            m=m, t=t, h=h, sync=sync,
            lhs=dev[m], rhs=float(rhs), slack=float(slack), ok=bool(slack >= -tolerance)))

        chain.append(float(gains.gamma(m) * chain[-1] + (1.0 + theta) * inj))

    measured = dev[-1]
    chained = chain[-1]
    chained_ok = chained >= measured * (1.0 - relative) - tolerance

    report = RecursionReport(steps=steps, measured=measured, chained=chained, chained_ok=bool(chained_ok), chain=chain)

    logger.debug({
        Operation: 'check-recursion',
        'min_slack': report.min_slack,
        'measured': measured,
        'chained': chained,
        'ok': report.ok,
        Classification: InfoClassification.SHARED
    })

    return report


def _check_table(gains: GainTable, M: int) -> None:
    if gains.M != M:
        raise IncompleteTableError(f'Gain table covers {gains.M} blocks, {M} needed', details={'table': gains.M, 'M': M})


def theorem1_bound(gains: GainTable, H: int, T: int) -> float:
    """ Bound on the final deviation for a uniform schedule of *T* rounds of *H* blocks.

        Sums, over every local block `m = H*t + h` (`h < H`), its injection
        amplified by the gains of every later block of its round and of all
        later rounds.
    """
    if H < 1 or T < 1:
        raise ScheduleError('H and T must be positive', details={'H': H, 'T': T})

    M = H * T
    _check_table(gains, M)

    total = 0.0
    for t in range(T):
        for h in range(1, H):
            m = H * t + h
            intra = gains.amplification(m + 1, H * t + H)
            inter = gains.amplification(H * (t + 1) + 1, M)
            total += gains.injection(m) * intra * inter

    return total


def _geometric(gamma: float, first: int, last: int) -> float:
    """`gamma^first + ... + gamma^last`, 0 when empty."""
    return float(sum(gamma ** k for k in range(first, last + 1)))


def term_e(gamma: float, H: int) -> float:
    """ `1 - (gamma - 1) / (gamma^H - 1)`.

        Written as `(gamma + ... + gamma^(H-1)) / (1 + ... + gamma^(H-1))` which
        is finite at `gamma = 1` where it equals `1 - 1/H`, and 0 at `H = 1`.
    """
    if H < 1:
        raise ScheduleError(f'H={H} must be positive', details={'H': H})

    return _geometric(gamma, 1, H - 1) / _geometric(gamma, 0, H - 1)


def term_d(gamma: float, M: int) -> float:
    """`(gamma^M - 1) / (gamma - 1)`, equal to `M` at `gamma = 1`."""
    return _geometric(gamma, 0, M - 1)


def corollary1_bound(theta: float, rho: float, sigma_sum: float, H: int, M: int) -> float:
    """Closed form bound under uniform constants."""
    if theta < 0 or rho < 0 or sigma_sum < 0:
        raise IncompleteTableError('Uniform constants must be nonnegative', details={'theta': theta, 'rho': rho})
    if H < 1 or M % H != 0:
        raise ScheduleError(f'H={H} does not divide M={M}', details={'H': H, 'M': M})

    gamma = (1.0 + theta) * (1.0 + rho)
    return (1.0 + theta) * sigma_sum * term_d(gamma, M) * term_e(gamma, H)


def gamma_reduction(gains: GainTable, m: int, M: int) -> float:
    """ Error reduction of performing global attention at block *m*.

        `(1 + theta_m) * sum_n sigma_n^m` amplified by the gains of blocks `m+1..M`.
    """
    _check_table(gains, M)
    if m < 1 or m > M:
        raise ScheduleError(f'Block {m} outside 1..{M}', details={'block': m, 'M': M})

    return gains.injection(m) * gains.amplification(m + 1, M)


def theorem3_bound(gains: GainTable, schedule: SyncSchedule) -> float:
    """ Bound for an arbitrary schedule.

        The fully local error (every block injecting) minus the reduction
        `gamma_reduction` of every synchronization block.
    """
    M = schedule.M
    _check_table(gains, M)

    full = sum(gamma_reduction(gains, m, M) for m in range(1, M + 1))
    reductions = sum(gamma_reduction(gains, m, M) for m in schedule.sync_blocks)

    return float(full - reductions)


def marginal_comm(H: int) -> Tuple[float, float]:
    """ Moving from *H* to `H + 1` local forwards.

        Returns the communication reduction `1/H - 1/(H+1)` and the error
        limit `1 - 1/(H+1)` reached at `H + 1`.
    """
    if H < 1:
        raise ScheduleError(f'H={H} must be positive', details={'H': H})

    reduction = Fraction(1, H) - Fraction(1, H + 1)
    limit = 1 - Fraction(1, H + 1)

    return float(reduction), float(limit)


@dataclass(frozen=True)
class BoundRow:
    m: int
    sigma_sum: float
    theta: float
    rho: float
    gamma_m: float
    Gamma_m: float
    cumulative_bound: float


def bound_rows(gains: GainTable, schedule: SyncSchedule) -> Iterator[BoundRow]:
    """ Per block view of *gains* under *schedule*.

        `cumulative_bound` chains the injections of the local blocks up to `m`.
    """
    _check_table(gains, schedule.M)

    bound = 0.0
    for m in range(1, schedule.M + 1):
        inj = 0.0 if schedule.is_sync(m) else gains.injection(m)
        bound = gains.gamma(m) * bound + inj

        yield BoundRow(
            m=m,
            sigma_sum=gains.sigma_sum(m),
            theta=float(gains.theta[m - 1]),
            rho=float(gains.rho[m - 1]),
            gamma_m=gains.gamma(m),
            Gamma_m=gamma_reduction(gains, m, schedule.M),
            cumulative_bound=bound
        )


def bounds_to_csv(gains: GainTable, schedule: SyncSchedule, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(BOUND_COLUMNS)
    for row in bound_rows(gains, schedule):
        writer.writerow([row.m, row.sigma_sum, row.theta, row.rho, row.gamma_m, row.Gamma_m, row.cumulative_bound])


def rank_sync_blocks(gains: GainTable) -> List[int]:
    """Blocks ordered by decreasing `gamma_reduction`, the lower block first on ties."""
    M = gains.M
    return sorted(range(1, M + 1), key=lambda m: (-gamma_reduction(gains, m, M), m))
