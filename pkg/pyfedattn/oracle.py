"""Reference executions and deviation measurement.

    `run_cenattn` is the centralized forward every FedAttn run is compared
    with, `run_locattn` the execution without any exchange. `measure_sigma`
    evaluates, at the state FedAttn actually reached before each block, how far
    each participant's local attention is from the attention over all tokens.
"""
import csv

from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from pyfedattn.base import Operation, Classification, InfoClassification
from pyfedattn.errors import ShapeError, IncompleteTableError
from pyfedattn.falogging import FedAttnLogger, get_logger
from pyfedattn.model import (
    ModelWeights,
    attention,
    attention_weights,
    build_mask,
    check_positions,
    finish_block,
    qkv_project,
)
from pyfedattn.numkernel import Mat, as_mat, frob_dist
from pyfedattn.partition import Partition
from pyfedattn.protocol import (
    DecodeResult,
    FedOptions,
    KVCache,
    RunTrace,
    SyncSchedule,
    empty_schedule,
    greedy_decode,
    run_fedattn,
)

DEVIATION_COLUMNS = ['t', 'h', 'm', 'n', 'sigma', 'state_dev', 'attn_dev']


@dataclass(frozen=True, eq=False)
class CenTrace:
    """ States of the centralized forward.

        `states[m]` follows block `m` (`states[0]` are the embeddings), rows in
        the order of `positions`.
    """
    positions: np.ndarray
    states: List[Mat]
    attn: List[Mat]
    caches: List[KVCache]
    owner: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return len(self.states) - 1

    def final_state(self) -> Mat:
        return self.states[-1]

    def rows(self, positions: Sequence[int]) -> np.ndarray:
        """Row numbers of *positions* in this trace."""
        positions = np.asarray(positions, dtype=np.int64)
        rows = np.searchsorted(self.positions, positions)

        found = rows < len(self.positions)
        if not found.all() or np.any(self.positions[rows[found]] != positions[found]):
            raise ShapeError('Positions missing from the centralized trace', details={'positions': positions.tolist()})

        return rows


def run_cenattn(
        global_embeds: Mat,
        weights: ModelWeights,
        positions: Optional[Sequence[int]] = None,
        owner: Optional[Sequence[int]] = None,
        n_blocks: Optional[int] = None,
        logger: Optional[FedAttnLogger] = None) -> CenTrace:
    """ The standard forward over the whole sequence.

        Args:
            global_embeds:  Embeddings of every token, rows in position order.
            positions:      Global positions of the rows, `0..L-1` by default.
            owner:          Per row participant; when set, keys of another
                            participant are masked (block-diagonal attention).
            n_blocks:       Run only the first blocks, `0` returns the input.
    """
    logger = logger or get_logger()
    x = as_mat(global_embeds, 'global_embeds')

    positions = np.arange(x.shape[0], dtype=np.int64) if positions is None \
        else np.asarray(check_positions(positions), dtype=np.int64)

    if len(positions) != x.shape[0]:
        raise ShapeError('positions differ from the row count', details={'rows': x.shape[0], 'positions': len(positions)})

    if x.shape[1] != weights.d:
        raise ShapeError(f'Embedding width {x.shape[1]} differs from {weights.d}', details={'shape': list(x.shape)})

    owner_arr = None if owner is None else np.asarray(owner, dtype=np.int64)
    mask = build_mask(positions, positions, weights.config.causal, owner_arr, owner_arr)

    blocks = weights.blocks if n_blocks is None else weights.blocks[:n_blocks]
    eps = weights.config.eps

    logger.debug({Operation: 'run-cenattn', 'L': x.shape[0], 'blocks': len(blocks), 'block_diagonal': owner is not None})

    states, attn, caches = [x], [], []
    for block in blocks:
        step = finish_block(x, qkv_project(x, block, eps), block, 'self', mask, eps)
        x = step.x_out
        states.append(x)
        attn.append(step.attn)
        caches.append(KVCache(positions, step.k, step.v, is_global=True))

    return CenTrace(positions=positions, states=states, attn=attn, caches=caches, owner=owner_arr)


def cen_decode(cen: CenTrace, weights: ModelWeights, max_new: int, start_pos: Optional[int] = None) -> DecodeResult:
    """Greedy decoding on the centralized caches, from the last token's final state."""
    start = int(cen.positions[-1]) + 1 if start_pos is None else start_pos
    return greedy_decode(cen.caches, cen.final_state()[-1:, :], start, weights, max_new)


def run_locattn(
        embeds: Sequence[Mat],
        weights: ModelWeights,
        p: Partition,
        opts: Optional[FedOptions] = None,
        logger: Optional[FedAttnLogger] = None) -> RunTrace:
    """Every block local, nothing exchanged: `run_fedattn` with an empty schedule."""
    opts = opts or FedOptions()
    if opts.per_participant_schedules:
        opts = opts.copy(update={'per_participant_schedules': None})

    return run_fedattn(embeds, weights, p, empty_schedule(weights.M), opts, logger)


def round_position(schedule: SyncSchedule, m: int) -> Tuple[int, int]:
    """ `(t, h)` of block *m*: the round it belongs to and its 1-based place in it.

        For a uniform schedule `m = H * t + h`.
    """
    before = [s for s in schedule.sync_blocks if s < m]
    return len(before), m - (before[-1] if before else 0)


@dataclass(frozen=True, eq=False)
class DeviationReport:
    """ Realized deviations of one FedAttn run.

        + `sigma[m-1, n]`: gap between participant `n`'s local and global
          attention outputs at block `m`, evaluated at the FedAttn state.
        + `state_dev[m]`: distance of the state after block `m` from the
          centralized state (`state_dev[0]` compares the embeddings).
        + `attn_dev[m-1]`: distance of the attention output FedAttn used at
          block `m` from the global attention of the same state.
        + `participant_dev[m, n]`: `state_dev` restricted to participant `n`'s rows.
    """
    schedule: SyncSchedule
    sigma: np.ndarray
    state_dev: np.ndarray
    attn_dev: np.ndarray
    participant_dev: np.ndarray

    @property
    def M(self) -> int:
        return self.sigma.shape[0]

    @property
    def N(self) -> int:
        return self.sigma.shape[1]

    def sigma_sum(self, m: int) -> float:
        return float(np.sum(self.sigma[m - 1, :]))

    def rows(self) -> Iterator[Dict[str, Any]]:
        for m in range(1, self.M + 1):
            t, h = round_position(self.schedule, m)
            for n in range(self.N):
                yield {
                    't': t, 'h': h, 'm': m, 'n': n,
                    'sigma': float(self.sigma[m - 1, n]),
                    'state_dev': float(self.state_dev[m]),
                    'attn_dev': float(self.attn_dev[m - 1])
                }

    def to_csv(self, stream: TextIO) -> None:
        writer = csv.DictWriter(stream, fieldnames=DEVIATION_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in self.rows():
            writer.writerow(row)

    def dict(self) -> Dict[str, Any]:
        return {
            'schedule': self.schedule.dict(),
            'sigma': self.sigma.tolist(),
            'state_dev': self.state_dev.tolist(),
            'attn_dev': self.attn_dev.tolist(),
            'participant_dev': self.participant_dev.tolist()
        }


def _owners(trace: RunTrace, p: Partition) -> Optional[np.ndarray]:
    return p.assign[trace.surviving] if trace.options.block_diagonal else None


def global_attention(
        weights: ModelWeights,
        x: Mat,
        positions: np.ndarray,
        m: int,
        owners: Optional[np.ndarray] = None) -> Mat:
    """Attention sub-layer output of block *m* over all rows of *x* (the centralized operator)."""
    block = weights.blocks[m - 1]
    q, k, v = qkv_project(x, block, weights.config.eps)
    return attention(q, k, v, build_mask(positions, positions, weights.config.causal, owners, owners))


def measure_sigma(
        weights: ModelWeights,
        trace: RunTrace,
        p: Partition,
        cen: Optional[CenTrace] = None,
        logger: Optional[FedAttnLogger] = None) -> DeviationReport:
    """ Realized local-vs-global attention gaps along the FedAttn trajectory.

        *cen* is the centralized forward over the whole prompt. The state
        deviation compares FedAttn with it at the tokens FedAttn kept, so
        tokens dropped by sparse local attention count as error. When *cen* is
        not given it is run from FedAttn's embeddings, which needs every token
        kept. With block-diagonal options the global branch masks keys of other
        participants too.

        Raises:
            IncompleteTableError: When *cen* is missing and tokens were dropped.
    """
    logger = logger or get_logger()

    M, N = trace.M, trace.N
    if len(trace.states[0]) != M + 1 or weights.M != M:
        raise IncompleteTableError('Trace does not hold every block state', details={'M': M})

    surviving = trace.surviving
    owners = _owners(trace, p)
    causal, eps = weights.config.causal, weights.config.eps

    if cen is None:
        if len(surviving) != p.L:
            raise IncompleteTableError(
                'Sparse local runs need the centralized trace over every token',
                details={'kept': len(surviving), 'L': p.L}
            )
        cen = run_cenattn(trace.global_state(0), weights, surviving, owners, logger=logger)

    cen_rows = cen.rows(surviving)
    member_rows = [np.searchsorted(surviving, trace.survivors[n]) for n in range(N)]

    sigma = np.zeros((M, N))
    attn_dev = np.zeros(M)
    state_dev = np.zeros(M + 1)
    participant_dev = np.zeros((M + 1, N))

    for m in range(0, M + 1):
        fed = trace.global_state(m)
        ref = cen.states[m][cen_rows, :]
        state_dev[m] = frob_dist(fed, ref)
        for n in range(N):
            participant_dev[m, n] = frob_dist(fed[member_rows[n], :], ref[member_rows[n], :])

    full_mask = build_mask(surviving, surviving, causal, owners, owners)

    for m in range(1, M + 1):
        x = trace.global_state(m - 1)
        q, k, v = qkv_project(x, weights.blocks[m - 1], eps)

        attn_dev[m - 1] = frob_dist(trace.global_attn(m), attention(q, k, v, full_mask))

        for n in range(N):
            r = member_rows[n]
            g = trace.survivors[n]

            local = attention(q[r, :], k[r, :], v[r, :], build_mask(g, g, causal))
            glob = attention(q[r, :], k, v, full_mask[r, :])
            sigma[m - 1, n] = frob_dist(local, glob)

    logger.debug({
        Operation: 'measure-sigma',
        'M': M, 'N': N,
        'final_state_dev': float(state_dev[M]),
        Classification: InfoClassification.SHARED
    })

    return DeviationReport(
        schedule=trace.schedule,
        sigma=sigma,
        state_dev=state_dev,
        attn_dev=attn_dev,
        participant_dev=participant_dev
    )


def attention_mass(weights: ModelWeights, trace: RunTrace, p: Partition, m: int) -> np.ndarray:
    """ Where each participant's global attention goes at block *m*.

        Entry `[n, n2]` is the mean, over participant `n`'s query rows, of the
        probability mass placed on keys owned by `n2`. Rows sum to one.
    """
    if m < 1 or m > trace.M:
        raise IncompleteTableError(f'No block {m}', details={'block': m})

    surviving = trace.surviving
    x = trace.global_state(m - 1)
    q, k, _ = qkv_project(x, weights.blocks[m - 1], weights.config.eps)

    owners = p.assign[surviving]
    probs = attention_weights(q, k, build_mask(surviving, surviving, weights.config.causal))

    mass = np.zeros((trace.N, trace.N))
    for n in range(trace.N):
        rows = probs[owners == n, :]
        for n2 in range(trace.N):
            mass[n, n2] = float(np.mean(np.sum(rows[:, owners == n2], axis=1)))

    return mass
