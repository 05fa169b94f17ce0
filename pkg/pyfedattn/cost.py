"""Communication, FLOP and memory accounting.

    The analytical predictions here replay the engine's sampling decisions
    (`sparse_sample_local`, `sparse_sample_kv`) without touching any
    activation, so predicted bits and FLOPs equal the instrumented counters
    of a `RunTrace` exactly. FLOPs follow the convention of `pyfedattn.flops`.
"""
import csv

from dataclasses import dataclass
from enum import Enum
from itertools import chain
from typing import Dict, List, Optional, TextIO

from pyfedattn.flops import block_flops
from pyfedattn.model import ModelConfig
from pyfedattn.partition import Partition
from pyfedattn.protocol import (
    FedOptions,
    RoundContext,
    RunTrace,
    SyncSchedule,
    participant_schedules,
    sparse_sample_kv,
    sparse_sample_local,
)
from pyfedattn.transport import Topology

COST_COLUMNS = ['participant', 'bits_sent', 'bits_received', 'prefill_flops', 'decode_flops_per_step', 'peak_scalars']


class AttentionMode(str, Enum):
    LOCAL = 'local'
    GLOBAL = 'global'


@dataclass(frozen=True)
class CommBits:
    bits_sent: List[int]
    bits_received: List[int]
    relay_bits: int = 0

    @property
    def total_sent(self) -> int:
        return sum(self.bits_sent)


@dataclass(frozen=True)
class _Plan:
    """What every participant keeps, and per sync block who transmits how many rows."""
    kept: List[int]
    schedules: List[tuple]
    union: SyncSchedule
    sent: Dict[int, Dict[int, int]]


def _plan(p: Partition, sched: SyncSchedule, opts: FedOptions) -> _Plan:
    schedules = participant_schedules(p, sched, opts)
    union = SyncSchedule(sched.M, tuple(sorted(set(chain.from_iterable(schedules)))))
    survivors = [sparse_sample_local(p, n, opts.local_token_ratio, opts.seed) for n in range(p.N)]

    sent: Dict[int, Dict[int, int]] = {}
    rounds = [0] * p.N
    for m in union.sync_blocks:
        sent[m] = {}
        for n in range(p.N):
            if m in schedules[n]:
                chosen = sparse_sample_kv(RoundContext(m, rounds[n], survivors[n]), n, opts.kv_exchange_ratio, opts.seed)
                if len(chosen):
                    sent[m][n] = len(chosen)
                rounds[n] += 1

    return _Plan(kept=[len(s) for s in survivors], schedules=schedules, union=union, sent=sent)


def _visible_keys(plan: _Plan, n: int, m: int) -> int:
    """Keys participant *n* attends to at block *m*."""
    if m not in plan.sent:
        return plan.kept[n]
    return plan.kept[n] + sum(c for sender, c in plan.sent[m].items() if sender != n)


def comm_bits(p: Partition, sched: SyncSchedule, opts: FedOptions, config: ModelConfig) -> CommBits:
    """ Predicted bits per participant.

        A payload is `2 * |sampled| * d * wire_bits`. All-to-all charges the
        sender once per peer, star once; every peer receives each payload once.
    """
    plan = _plan(p, sched, opts)
    sent, received, relay = [0] * p.N, [0] * p.N, 0
    peers = p.N - 1

    for m, senders in plan.sent.items():
        for n, count in senders.items():
            payload = 2 * count * config.d * opts.wire_bits

            if opts.topology == Topology.STAR:
                sent[n] += payload
                relay += payload + payload * peers
            else:
                sent[n] += payload * peers

            for r in range(p.N):
                if r != n:
                    received[r] += payload

    return CommBits(bits_sent=sent, bits_received=received, relay_bits=relay)


def flops_prefill(
        L_eff: int,
        d: int,
        d_ff: int,
        blocks: int,
        mode: AttentionMode = AttentionMode.LOCAL,
        L_global: Optional[int] = None) -> int:
    """ Prefill FLOPs of *blocks* blocks for *L_eff* query rows.

        In `GLOBAL` mode the keys number *L_global* while the queries stay *L_eff*.
    """
    keys = L_eff if AttentionMode(mode) == AttentionMode.LOCAL else (L_global if L_global is not None else L_eff)
    return blocks * block_flops(L_eff, keys, d, d_ff)


def participant_prefill_flops(p: Partition, sched: SyncSchedule, opts: FedOptions, config: ModelConfig) -> List[int]:
    """Predicted prefill FLOPs per participant, block by block."""
    plan = _plan(p, sched, opts)
    return [
        sum(block_flops(plan.kept[n], _visible_keys(plan, n, m), config.d, config.d_ff) for m in range(1, sched.M + 1))
        for n in range(p.N)
    ]


def decode_step_flops(cache_len: int, d: int, d_ff: int, blocks: int) -> int:
    """ One generated token through *blocks* blocks attending to *cache_len* keys each.

        *cache_len* counts every key the new query sees, its own included.
    """
    return blocks * block_flops(1, cache_len, d, d_ff)


def publisher_decode_flops(p: Partition, sched: SyncSchedule, opts: FedOptions, config: ModelConfig) -> int:
    """FLOPs of the first generated token forwarded through the publisher's caches."""
    plan = _plan(p, sched, opts)
    n = p.publisher
    return sum(
        decode_step_flops(_visible_keys(plan, n, m) + 1, config.d, config.d_ff, 1)
        for m in range(1, sched.M + 1)
    )


def weight_scalars(config: ModelConfig) -> int:
    d, d_ff = config.d, config.d_ff
    return config.M * (3 * d * d + 2 * d * d_ff + 4 * d) + config.vocab * d


def activation_scalars(lq: int, lk: int, d: int, d_ff: int) -> int:
    """ Live scalars while one block runs for *lq* queries over *lk* keys.

        Input, q, k, v, attention output, FFN input, FFN hidden, output and the
        score matrix.
    """
    return lq * (7 * d + d_ff) + lq * lk


@dataclass(frozen=True)
class PeakMemory:
    scalars: List[int]
    storage_bytes: int = 8

    @property
    def bytes(self) -> List[int]:
        return [s * self.storage_bytes for s in self.scalars]


def peak_memory(
        p: Partition,
        sched: SyncSchedule,
        config: ModelConfig,
        opts: Optional[FedOptions] = None,
        storage_bytes: int = 8) -> PeakMemory:
    """ Resident scalars per participant at the end of prefill.

        Weights, the KV cache of every block (own keys at a local block, every
        visible key at a sync block) and the largest activation set of a block.
    """
    plan = _plan(p, sched, opts or FedOptions())
    weights = weight_scalars(config)

    scalars = []
    for n in range(p.N):
        keys = [_visible_keys(plan, n, m) for m in range(1, sched.M + 1)]
        caches = sum(2 * config.d * k for k in keys)
        activations = max(activation_scalars(plan.kept[n], k, config.d, config.d_ff) for k in keys)
        scalars.append(weights + caches + activations)

    return PeakMemory(scalars=scalars, storage_bytes=storage_bytes)


def centralized_memory(L: int, config: ModelConfig, storage_bytes: int = 8) -> PeakMemory:
    """Peak memory of the centralized forward over *L* tokens."""
    p = Partition.from_locals([list(range(L))])
    return peak_memory(p, SyncSchedule(config.M, ()), config, FedOptions(), storage_bytes)


@dataclass(frozen=True)
class CostRow:
    participant: int
    bits_sent: int
    bits_received: int
    prefill_flops: int
    decode_flops_per_step: int
    peak_scalars: int


@dataclass(frozen=True)
class CostReport:
    rows: List[CostRow]
    relay_bits: int = 0
    handoff_bits: int = 0

    def to_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(COST_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.participant, r.bits_sent, r.bits_received,
                r.prefill_flops, r.decode_flops_per_step, r.peak_scalars
            ])

    def mean(self, column: str) -> float:
        return sum(getattr(r, column) for r in self.rows) / len(self.rows)


def cost_report(trace: RunTrace, config: ModelConfig, sched: Optional[SyncSchedule] = None) -> CostReport:
    """ Costs of an executed run.

        Bits and prefill FLOPs are the trace's instrumented counters; decode
        FLOPs are the publisher's first generated-token step and peak memory is
        predicted from the run's schedule.
    """
    p = trace.partition
    sched = sched or trace.schedule
    memory = peak_memory(p, sched, config, trace.options)
    decode = publisher_decode_flops(p, sched, trace.options, config)

    rows = [
        CostRow(
            participant=n,
            bits_sent=trace.bits_sent[n],
            bits_received=trace.bits_received[n],
            prefill_flops=trace.flops_prefill[n],
            decode_flops_per_step=decode if n == p.publisher else 0,
            peak_scalars=memory.scalars[n]
        )
        for n in range(p.N)
    ]

    return CostReport(rows=rows, relay_bits=trace.relay_bits, handoff_bits=trace.handoff_bits)

