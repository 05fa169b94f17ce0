"""The FedAttn execution engine.

    Every participant runs the model over its own token segment. At blocks not
    in the synchronization schedule a participant attends to its own keys and
    values only. At a synchronization block every participant whose schedule
    contains the block transmits its (possibly sampled) keys and values, and
    every participant attends to its own full KV plus everything the others
    transmitted at that block.

    Conventions: participants and token indices are 0-based, blocks are
    1-based (`1..M`) so schedules read as `{H, 2H, ..., M}`. Causal masking
    always compares GLOBAL token indices, which makes a schedule with every
    block synchronized reproduce the centralized forward.

    Participants are independent between barriers and run on a thread pool;
    results are collected in participant order and the aggregation is a
    sequential reduction, so a trace does not depend on the thread count.
"""
import math

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from itertools import chain
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pydantic import BaseModel, Field, validator

from pyfedattn.base import Operation, Classification, InfoClassification
from pyfedattn.environment import default_threads, default_wire_bits
from pyfedattn.errors import ScheduleError, PartitionError, ShapeError, IncompleteTableError
from pyfedattn.falogging import FedAttnLogger, get_logger
from pyfedattn.flops import block_flops
from pyfedattn.model import (
    KVSource,
    ModelWeights,
    BlockStep,
    build_mask,
    embed_tokens,
    finish_block,
    greedy_token,
    logits,
    qkv_project,
)
from pyfedattn.numkernel import Mat, as_mat
from pyfedattn.partition import Partition
from pyfedattn.rng import generator
from pyfedattn.transport import KVMessage, MessageBus, Topology


class ScheduleKind(str, Enum):
    ShallowHalf = 'ShallowHalf'
    DeepHalf = 'DeepHalf'
    Progressive = 'Progressive'
    Regressive = 'Regressive'


@dataclass(frozen=True)
class SyncSchedule:
    """ Blocks (1-based) performing global self-attention.

        Raises:
            ScheduleError: When a block is outside `1..M` or the blocks are not increasing.
    """
    M: int
    sync_blocks: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'sync_blocks', tuple(int(m) for m in self.sync_blocks))

        if self.M < 1:
            raise ScheduleError(f'Block count {self.M} must be positive', details={'M': self.M})

        previous = 0
        for m in self.sync_blocks:
            if m < 1 or m > self.M:
                raise ScheduleError(f'Sync block {m} outside 1..{self.M}', details={'block': m, 'M': self.M})
            if m <= previous:
                raise ScheduleError('Sync blocks must be strictly increasing', details={'blocks': list(self.sync_blocks)})
            previous = m

    @property
    def T(self) -> int:
        """Number of communication rounds."""
        return len(self.sync_blocks)

    def is_sync(self, m: int) -> bool:
        return m in self.sync_blocks

    def dict(self) -> Dict[str, Any]:
        return {'M': self.M, 'sync_blocks': list(self.sync_blocks)}


def uniform_schedule(M: int, H: int) -> SyncSchedule:
    """Sync every *H* blocks: `{H, 2H, ..., M}`."""
    if H < 1 or M % H != 0:
        raise ScheduleError(f'H={H} does not divide M={M}', details={'M': M, 'H': H})

    return SyncSchedule(M, tuple(range(H, M + 1, H)))


def empty_schedule(M: int) -> SyncSchedule:
    """No synchronization at all, the fully local execution."""
    return SyncSchedule(M, ())


def _progressive_gaps(M: int, T: int) -> List[int]:
    """ Nondecreasing gaps summing to *M*.

        Arithmetic gaps `1, 1+s, 1+2s, ...` with the largest step `s` that fits;
        what is left is added one block at a time from the deepest gap upwards.
    """
    if T == 1:
        return [M]

    step = (M - T) // (T * (T - 1) // 2)
    gaps = [1 + step * k for k in range(T)]

    rest, k = M - sum(gaps), T - 1
    while rest > 0:
        gaps[k] += 1
        rest -= 1
        k = k - 1 if k > 0 else T - 1

    return gaps


def named_schedule(kind: ScheduleKind, M: int, T: int) -> SyncSchedule:
    """ One of the four depth-dependent schedules with exactly *T* syncs.

        + `ShallowHalf`: evenly spaced in `1..ceil(M/2)`.
        + `DeepHalf`: evenly spaced in `ceil(M/2)+1..M`.
        + `Progressive`: gaps growing with depth (`M=16, T=4` gives `{1, 4, 9, 16}`).
        + `Regressive`: the Progressive gaps reversed (`{7, 12, 15, 16}`).
    """
    kind = ScheduleKind(kind)

    if T < 1:
        raise ScheduleError(f'T={T} must be positive', details={'T': T})

    if kind in (ScheduleKind.ShallowHalf, ScheduleKind.DeepHalf):
        if T > M // 2:
            raise ScheduleError(f'T={T} syncs do not fit half of M={M}', details={'M': M, 'T': T})

        start = 0 if kind == ScheduleKind.ShallowHalf else (M + 1) // 2
        length = (M + 1) // 2 if kind == ScheduleKind.ShallowHalf else M - start

        return SyncSchedule(M, tuple(start + (k * length) // T for k in range(1, T + 1)))

    if T > M:
        raise ScheduleError(f'T={T} syncs exceed M={M} blocks', details={'M': M, 'T': T})

    gaps = _progressive_gaps(M, T)
    if kind == ScheduleKind.Regressive:
        gaps.reverse()

    return SyncSchedule(M, tuple(int(b) for b in np.cumsum(gaps)))


def publisher_schedule(
        M: int, H_others: int, H_publisher: int, publisher: int, N: int) -> Tuple[SyncSchedule, Dict[int, List[int]]]:
    """ Adaptive aggregation where the publisher syncs at its own interval.

        Returns the union schedule and the per participant map for
        `FedOptions.per_participant_schedules`.
    """
    others = uniform_schedule(M, H_others).sync_blocks
    mine = uniform_schedule(M, H_publisher).sync_blocks

    per_participant = {n: list(mine if n == publisher else others) for n in range(N)}
    union = SyncSchedule(M, tuple(sorted(set(others) | set(mine))))

    return union, per_participant


class FedOptions(BaseModel):
    """Knobs of one FedAttn execution."""

    local_token_ratio: float = Field(1.0, gt=0, le=1)
    """Share of its tokens a participant keeps for the whole run."""
    kv_exchange_ratio: float = Field(1.0, ge=0, le=1)
    """Share of its kept tokens a participant transmits per round; `0` transmits nothing."""
    per_participant_schedules: Optional[Dict[int, List[int]]] = None
    """Sync blocks overriding the run schedule for some participants."""
    wire_bits: int = Field(default_factory=default_wire_bits, ge=1, le=255)
    seed: int = Field(0, ge=0)
    block_diagonal: bool = False
    """Mask every key owned by another participant (inter-participant attention removed)."""
    topology: Topology = Topology.ALL_TO_ALL
    threads: int = Field(default_factory=default_threads, ge=1)

    @validator('per_participant_schedules')
    def _participant_ids(cls, v):
        if v is not None:
            for n in v:
                if n < 0:
                    raise ValueError(f'negative participant id {n}')
        return v

    class Config:
        allow_mutation = False
        extra = 'forbid'


class RoundContext(NamedTuple):
    """What a participant knows when it samples the KV it transmits."""
    block: int
    round: int
    candidates: np.ndarray
    """Global indices of the participant's kept tokens."""


@dataclass(frozen=True, eq=False)
class KVCache:
    """Keys and values a block attends to during decoding, rows in global order."""
    globals: np.ndarray
    k: Mat
    v: Mat
    is_global: bool = False

    def __len__(self) -> int:
        return int(len(self.globals))

    def append(self, position: int, k: Mat, v: Mat) -> 'KVCache':
        return KVCache(
            globals=np.append(self.globals, position),
            k=np.vstack([self.k, k]),
            v=np.vstack([self.v, v]),
            is_global=self.is_global
        )


@dataclass(eq=False)
class RunTrace:
    """ Everything one execution produced.

        `states[n][m]` is participant `n`'s hidden state after block `m`
        (`states[n][0]` the embeddings), `attn[n][m-1]` the attention output and
        `caches[n][m-1]` the KV the block attended to.
    """
    partition: Partition
    schedule: SyncSchedule
    """Union of all participant schedules."""
    schedules: List[Tuple[int, ...]]
    options: FedOptions
    survivors: List[np.ndarray]
    """Global indices each participant kept."""
    states: List[List[Mat]]
    attn: List[List[Mat]]
    caches: List[List[KVCache]]
    aggregates: Dict[int, KVCache]
    """Everything transmitted at a sync block, in global order."""
    messages: List[KVMessage]
    bits_sent: List[int]
    bits_received: List[int]
    relay_bits: int
    flops_prefill: List[int]
    handoff_bits: int = 0
    decode_flops_per_step: List[int] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.partition.N

    @property
    def M(self) -> int:
        return self.schedule.M

    @property
    def surviving(self) -> np.ndarray:
        """Kept global indices of all participants, ascending."""
        return np.sort(np.concatenate(self.survivors))

    def _global_rows(self, per_participant: Sequence[Mat]) -> Mat:
        order = np.argsort(np.concatenate(self.survivors), kind='stable')
        return np.vstack(per_participant)[order, :]

    def global_state(self, m: int) -> Mat:
        """Hidden state after block *m* of every kept token, rows in global order."""
        if m < 0 or m > self.M:
            raise IncompleteTableError(f'No state for block {m}', details={'block': m})
        return self._global_rows([s[m] for s in self.states])

    def global_attn(self, m: int) -> Mat:
        if m < 1 or m > self.M:
            raise IncompleteTableError(f'No attention output for block {m}', details={'block': m})
        return self._global_rows([a[m - 1] for a in self.attn])

    def final_state(self) -> Mat:
        return self.global_state(self.M)

    def dict(self) -> Dict[str, Any]:
        """Summary for JSON export, without any matrix."""
        return {
            'partition': self.partition.dict(),
            'schedule': self.schedule.dict(),
            'schedules': [list(s) for s in self.schedules],
            'options': self.options.dict(),
            'survivors': [s.tolist() for s in self.survivors],
            'messages': [m.dict() for m in self.messages],
            'bits_sent': self.bits_sent,
            'bits_received': self.bits_received,
            'relay_bits': self.relay_bits,
            'flops_prefill': self.flops_prefill,
            'handoff_bits': self.handoff_bits,
            'decode_flops_per_step': self.decode_flops_per_step
        }


def kv_sample_size(count: int, ratio: float) -> int:
    """`ceil(ratio * count)` guarded against representation noise."""
    return int(math.ceil(round(ratio * count, 9)))


def sparse_sample_local(p: Partition, n: int, ratio: float, seed: int) -> np.ndarray:
    """ Tokens participant *n* keeps for the whole run.

        A uniform subset of `max(1, ceil(ratio * L_n))` of its global indices,
        ascending. `ratio == 1` keeps every token.
    """
    _check_ratio(ratio, 'local_token_ratio')
    owned = p.local(n)

    if ratio >= 1.0:
        return owned.copy()

    k = max(1, kv_sample_size(len(owned), ratio))
    return np.asarray(generator(seed, 'local', n).sample(owned.tolist(), k), dtype=np.int64)


def sparse_sample_kv(round_ctx: RoundContext, n: int, ratio: float, seed: int) -> np.ndarray:
    """ Tokens whose keys and values participant *n* transmits this round.

        A fresh uniform subset of `ceil(ratio * |candidates|)` per round; the
        owner itself always attends to all of its candidates. `ratio == 0`
        transmits nothing, which leaves every block local.
    """
    _check_ratio(ratio, 'kv_exchange_ratio', allow_zero=True)
    candidates = np.asarray(round_ctx.candidates, dtype=np.int64)

    if ratio >= 1.0:
        return candidates.copy()

    k = kv_sample_size(len(candidates), ratio)
    if k == 0:
        return np.zeros(0, dtype=np.int64)

    gen = generator(seed, 'kv', n, round_ctx.block, round_ctx.round)
    return np.asarray(gen.sample(candidates.tolist(), k), dtype=np.int64)


def _check_ratio(ratio: float, name: str, allow_zero: bool = False) -> None:
    above_low = ratio >= 0.0 if allow_zero else ratio > 0.0
    if not above_low or ratio > 1.0:
        interval = '[0, 1]' if allow_zero else '(0, 1]'
        raise ScheduleError(f'{name} {ratio} outside {interval}', details={'field': name})


def participant_schedules(p: Partition, sched: SyncSchedule, opts: FedOptions) -> List[Tuple[int, ...]]:
    """The sync blocks of every participant, the run schedule unless overridden."""
    overrides = opts.per_participant_schedules or {}

    for n in overrides:
        p.check_participant(n)

    return [
        SyncSchedule(sched.M, tuple(overrides[n])).sync_blocks if n in overrides else sched.sync_blocks
        for n in range(p.N)
    ]


def merge_kv(parts: Sequence[Tuple[np.ndarray, Mat, Mat]], d: int) -> Tuple[np.ndarray, Mat, Mat]:
    """Concatenates `(globals, K, V)` parts and orders the rows by global index."""
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros((0, d)), np.zeros((0, d))

    g = np.concatenate([part[0] for part in parts]).astype(np.int64)
    order = np.argsort(g, kind='stable')

    return (
        g[order],
        np.vstack([part[1] for part in parts])[order, :],
        np.vstack([part[2] for part in parts])[order, :]
    )


@contextmanager
def participant_map(threads: int) -> Iterator[Callable[[Callable[[int], Any], Sequence[int]], List[Any]]]:
    """Yields an order preserving map over participants, threaded when *threads* > 1."""
    if threads <= 1:
        yield lambda fn, items: [fn(i) for i in items]
        return

    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix='participant') as executor:
        yield lambda fn, items: list(executor.map(fn, items))


def _check_inputs(embeds: Sequence[Mat], weights: ModelWeights, p: Partition, sched: SyncSchedule) -> None:
    if weights.M != sched.M:
        raise ScheduleError(
            f'Schedule covers {sched.M} blocks, model has {weights.M}',
            details={'schedule': sched.M, 'model': weights.M}
        )

    if len(embeds) != p.N:
        raise ShapeError(
            f'Expected {p.N} participant embeddings, got {len(embeds)}',
            details={'count': len(embeds), 'N': p.N}
        )

    for n, x in enumerate(embeds):
        if len(p.locals[n]) == 0:
            raise PartitionError(f'Participant {n} owns no tokens', details={'participant': n})

        shape = np.shape(x)
        if len(shape) != 2 or shape[0] != len(p.locals[n]) or shape[1] != weights.d:
            raise ShapeError(
                f'Participant {n} embeddings have shape {shape}',
                details={'participant': n, 'expected': [len(p.locals[n]), weights.d]}
            )


def run_fedattn(
        embeds: Sequence[Mat],
        weights: ModelWeights,
        p: Partition,
        sched: SyncSchedule,
        opts: Optional[FedOptions] = None,
        logger: Optional[FedAttnLogger] = None) -> RunTrace:
    """ Prefills all participants through the *M* blocks.

        Args:
            embeds:     Per participant embeddings, rows in the participant's global order.
            weights:    The shared model.
            p:          Token ownership.
            sched:      Run schedule; `FedOptions.per_participant_schedules` may override it.
            opts:       Sparsity, adaptive aggregation and accounting options.

        Raises:
            ScheduleError:  Schedule and model disagree on M.
            ShapeError:     Embeddings do not match the partition.
            PartitionError: A participant owns no tokens.
    """
    opts = opts or FedOptions()
    logger = logger or get_logger()

    _check_inputs(embeds, weights, p, sched)

    N, M, d, eps = p.N, weights.M, weights.d, weights.config.eps
    causal = weights.config.causal

    schedules = participant_schedules(p, sched, opts)
    union = SyncSchedule(M, tuple(sorted(set(chain.from_iterable(schedules)))))

    survivors = [sparse_sample_local(p, n, opts.local_token_ratio, opts.seed) for n in range(N)]
    x = [
        as_mat(embeds[n])[np.searchsorted(p.locals[n], survivors[n]), :]
        for n in range(N)
    ]

    logger.info({
        Operation: 'run-fedattn',
        'N': N, 'L': p.L, 'M': M,
        'sync_blocks': list(union.sync_blocks),
        'kept': [len(s) for s in survivors],
        Classification: InfoClassification.SHARED
    })

    bus = MessageBus(N, opts.topology, logger)
    states: List[List[Mat]] = [[x[n]] for n in range(N)]
    attn: List[List[Mat]] = [[] for _ in range(N)]
    caches: List[List[KVCache]] = [[] for _ in range(N)]
    aggregates: Dict[int, KVCache] = {}
    flops = [0] * N
    rounds = [0] * N

    with participant_map(opts.threads) as pmap:
        for m in range(1, M + 1):
            block = weights.blocks[m - 1]

            if not union.is_sync(m):
                def local(n: int) -> Tuple[BlockStep, KVCache]:
                    g = survivors[n]
                    step = finish_block(
                        x[n], qkv_project(x[n], block, eps), block, 'self',
                        build_mask(g, g, causal), eps)
                    return step, KVCache(g, step.k, step.v, is_global=False)

                results = pmap(local, range(N))

            else:
                qkvs = pmap(lambda n: qkv_project(x[n], block, eps), range(N))

                for n in range(N):
                    if m not in schedules[n]:
                        continue

                    g = survivors[n]
                    chosen = sparse_sample_kv(RoundContext(m, rounds[n], g), n, opts.kv_exchange_ratio, opts.seed)
                    rows = np.searchsorted(g, chosen)
                    _, k, v = qkvs[n]

                    bus.transmit(KVMessage(
                        sender=n, round=rounds[n], block=m, token_globals=chosen,
                        k_payload=k[rows, :], v_payload=v[rows, :], wire_bits=opts.wire_bits))
                    rounds[n] += 1

                received = bus.sent_at(m)
                ag, ak, av = merge_kv([(r.token_globals, r.k_payload, r.v_payload) for r in received], d)
                aggregates[m] = KVCache(ag, ak, av, is_global=True)

                def consume(n: int) -> Tuple[BlockStep, KVCache]:
                    _, k, v = qkvs[n]
                    parts = [(survivors[n], k, v)] + [
                        (r.token_globals, r.k_payload, r.v_payload) for r in received if r.sender != n
                    ]
                    G, K, V = merge_kv(parts, d)

                    owners = (np.full(len(survivors[n]), n), p.assign[G]) if opts.block_diagonal else (None, None)
                    mask = build_mask(survivors[n], G, causal, *owners)

                    step = finish_block(x[n], qkvs[n], block, KVSource(K, V), mask, eps)
                    return step, KVCache(G, K, V, is_global=True)

                results = pmap(consume, range(N))

            for n, (step, cache) in enumerate(results):
                x[n] = step.x_out
                states[n].append(step.x_out)
                attn[n].append(step.attn)
                caches[n].append(cache)
                flops[n] += block_flops(len(survivors[n]), len(cache), d, weights.config.d_ff)

                logger.verbose({
                    Operation: 'run-fedattn',
                    'participant': n,
                    'block': m,
                    'keys': len(cache),
                    'state': step.x_out,
                    Classification: InfoClassification.PARTICIPANT_PRIVATE
                })

    trace = RunTrace(
        partition=p,
        schedule=union,
        schedules=schedules,
        options=opts,
        survivors=survivors,
        states=states,
        attn=attn,
        caches=caches,
        aggregates=aggregates,
        messages=list(bus.messages),
        bits_sent=list(bus.bits_sent),
        bits_received=list(bus.bits_received),
        relay_bits=bus.relay_bits,
        flops_prefill=flops
    )

    logger.info({
        Operation: 'run-fedattn',
        'messages': len(trace.messages),
        'bits_sent': trace.bits_sent,
        'flops_prefill': trace.flops_prefill,
        Classification: InfoClassification.SHARED
    })

    return trace


class DecodeResult(NamedTuple):
    tokens: List[int]
    logits: List[np.ndarray]
    """Logit row behind each emitted token."""
    step_flops: List[int]
    """FLOPs of each forward of a generated token through the blocks."""


def greedy_decode(
        caches: Sequence[KVCache],
        last_state: Mat,
        start_pos: int,
        weights: ModelWeights,
        max_new: int) -> DecodeResult:
    """ Greedy generation on top of prefilled per-block caches.

        The first token comes from *last_state*. Each generated token is
        embedded at position `start_pos + s`, attends at every block to that
        block's cache plus all earlier generated tokens, and its keys and values
        are appended. *caches* itself is left untouched.
    """
    if len(caches) != weights.M:
        raise IncompleteTableError(
            f'Decoding needs {weights.M} block caches, got {len(caches)}',
            details={'caches': len(caches), 'M': weights.M}
        )

    cache = list(caches)
    state = as_mat(last_state)
    eps, d, d_ff = weights.config.eps, weights.d, weights.config.d_ff

    tokens: List[int] = []
    rows: List[np.ndarray] = []
    step_flops: List[int] = []

    for s in range(max_new):
        row = logits(state, weights)[0]
        rows.append(row)
        tokens.append(greedy_token(row))

        if s == max_new - 1:
            break

        position = start_pos + s
        h = embed_tokens([tokens[-1]], [position], weights)
        count = 0

        for m, block in enumerate(weights.blocks):
            qkv = qkv_project(h, block, eps)
            cache[m] = cache[m].append(position, qkv[1], qkv[2])
            h = finish_block(h, qkv, block, KVSource(cache[m].k, cache[m].v), None, eps).x_out
            count += block_flops(1, len(cache[m]), d, d_ff)

        step_flops.append(count)
        state = h

    return DecodeResult(tokens=tokens, logits=rows, step_flops=step_flops)


def decode_greedy(
        trace: RunTrace,
        weights: ModelWeights,
        p: Partition,
        max_new: int,
        logger: Optional[FedAttnLogger] = None) -> List[int]:
    """ The publisher decodes from the final state of the last global token.

        Local blocks decode against the publisher's local cache, sync blocks
        against the global view it attended to. When another participant owns
        the last token, its final hidden row is handed to the publisher and the
        hand-off is charged to `trace.handoff_bits`.
    """
    logger = logger or get_logger()
    publisher = p.publisher

    if len(trace.caches[publisher]) != weights.M or weights.M == 0:
        raise IncompleteTableError('The trace holds no complete KV cache', details={'publisher': publisher})

    if max_new <= 0:
        return []

    last = int(trace.surviving[-1])
    owner = int(p.assign[last])
    row = int(np.searchsorted(trace.survivors[owner], last))
    last_state = trace.states[owner][weights.M][row:row + 1, :]

    trace.handoff_bits = 0 if owner == publisher else weights.d * trace.options.wire_bits

    result = greedy_decode(trace.caches[publisher], last_state, p.L, weights, max_new)
    trace.decode_flops_per_step = result.step_flops

    logger.info({
        Operation: 'decode-greedy',
        'publisher': publisher,
        'handoff_from': owner,
        'max_new': max_new,
        Classification: InfoClassification.SHARED
    })

    return result.tokens
