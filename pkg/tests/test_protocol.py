import math

import numpy as np
import pytest

from pyfedattn.errors import ScheduleError, ShapeError, IncompleteTableError
from pyfedattn.flops import block_flops
from pyfedattn.model import ModelConfig, init_weights, embed_tokens
from pyfedattn.numkernel import frob_dist
from pyfedattn.oracle import run_cenattn, run_locattn, cen_decode
from pyfedattn.partition import Partition, Strategy, gen_corpus, make_partition, gather
from pyfedattn.protocol import (
    FedOptions,
    RoundContext,
    ScheduleKind,
    SyncSchedule,
    decode_greedy,
    empty_schedule,
    kv_sample_size,
    named_schedule,
    publisher_schedule,
    run_fedattn,
    sparse_sample_kv,
    sparse_sample_local,
    uniform_schedule,
)
from pyfedattn.transport import Topology

CONFIG = ModelConfig(d=8, d_ff=16, M=4, vocab=20, seed=1)


@pytest.fixture(scope='module')
def weights():
    return init_weights(CONFIG)


@pytest.fixture(scope='module')
def corpus():
    return gen_corpus(3, (3, 5), CONFIG.vocab, 5)


def setup_run(weights, corpus, N=3, strategy=Strategy.TokSeg_QAg):
    p = make_partition(corpus, N, strategy)
    x = embed_tokens(corpus.tokens, range(corpus.L), weights)
    return p, x, [gather(x, p, n) for n in range(p.N)]


def test_uniform_schedule():
    assert uniform_schedule(8, 2).sync_blocks == (2, 4, 6, 8)
    assert uniform_schedule(8, 8).T == 1
    assert uniform_schedule(4, 1).sync_blocks == (1, 2, 3, 4)

    with pytest.raises(ScheduleError):
        uniform_schedule(8, 3)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        SyncSchedule(4, (0,))

    with pytest.raises(ScheduleError):
        SyncSchedule(4, (5,))

    with pytest.raises(ScheduleError):
        SyncSchedule(4, (3, 2))

    with pytest.raises(ScheduleError):
        SyncSchedule(0)


def test_named_schedules():
    assert named_schedule(ScheduleKind.Progressive, 16, 4).sync_blocks == (1, 4, 9, 16)
    assert named_schedule(ScheduleKind.Regressive, 16, 4).sync_blocks == (7, 12, 15, 16)
    assert named_schedule('ShallowHalf', 8, 2).sync_blocks == (2, 4)
    assert named_schedule('DeepHalf', 8, 2).sync_blocks == (6, 8)
    assert named_schedule('Progressive', 8, 1).sync_blocks == (8,)

    with pytest.raises(ScheduleError):
        named_schedule('ShallowHalf', 8, 5)

    with pytest.raises(ScheduleError):
        named_schedule('Progressive', 4, 5)


@pytest.mark.parametrize('M, T', [(8, 2), (12, 3), (16, 4), (24, 5), (32, 8)])
def test_progressive_gaps_grow_with_depth(M, T):
    blocks = (0,) + named_schedule('Progressive', M, T).sync_blocks
    gaps = [b - a for a, b in zip(blocks, blocks[1:])]

    assert blocks[-1] == M
    assert len(gaps) == T
    assert gaps == sorted(gaps)


def test_publisher_schedule():
    union, per = publisher_schedule(8, 4, 2, 2, 3)

    assert union.sync_blocks == (2, 4, 6, 8)
    assert per == {0: [4, 8], 1: [4, 8], 2: [2, 4, 6, 8]}


def test_kv_sample_size():
    assert kv_sample_size(8, 0.5) == 4
    assert kv_sample_size(7, 0.5) == 4
    assert kv_sample_size(10, 0.3) == 3


def test_samplers_are_deterministic():
    p = Partition.from_locals([list(range(0, 10)), list(range(10, 20))])

    kept = sparse_sample_local(p, 0, 0.5, 9)
    assert kept.tolist() == sparse_sample_local(p, 0, 0.5, 9).tolist()
    assert len(kept) == 5
    assert set(kept.tolist()) <= set(range(10))
    assert sparse_sample_local(p, 1, 1.0, 9).tolist() == list(range(10, 20))
    assert len(sparse_sample_local(p, 0, 0.01, 9)) == 1

    ctx = RoundContext(block=2, round=0, candidates=kept)
    sent = sparse_sample_kv(ctx, 0, 0.5, 9)
    assert len(sent) == 3
    assert sent.tolist() == sorted(sent.tolist())
    assert set(sent.tolist()) <= set(kept.tolist())

    assert sparse_sample_kv(ctx, 0, 0.0, 9).tolist() == []

    with pytest.raises(ScheduleError):
        sparse_sample_kv(ctx, 0, -0.5, 9)

    with pytest.raises(ScheduleError):
        sparse_sample_local(p, 0, 0.0, 9)


def test_options_are_validated():
    with pytest.raises(ValueError):
        FedOptions(local_token_ratio=0.0)

    with pytest.raises(ValueError):
        FedOptions(kv_exchange_ratio=1.5)

    with pytest.raises(ValueError):
        FedOptions(kv_exchange_ratio=-0.1)

    assert FedOptions(kv_exchange_ratio=0.0).kv_exchange_ratio == 0.0

    with pytest.raises(ValueError):
        FedOptions(unknown=1)

    with pytest.raises(ValueError):
        FedOptions(per_participant_schedules={-1: [1]})


def test_full_sync_matches_centralized(weights, corpus):
    p, x, embeds = setup_run(weights, corpus)

    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(threads=1))
    cen = run_cenattn(x, weights)

    assert np.max(np.abs(trace.final_state() - cen.final_state())) <= 1e-9
    for m in range(5):
        assert np.max(np.abs(trace.global_state(m) - cen.states[m])) <= 1e-9


def test_empty_schedule_is_local_attention(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    opts = FedOptions(threads=1)

    fed = run_fedattn(embeds, weights, p, empty_schedule(4), opts)
    loc = run_locattn(embeds, weights, p, opts)

    assert fed.messages == [] and fed.bits_sent == [0, 0, 0]
    for n in range(p.N):
        assert np.array_equal(fed.states[n][4], loc.states[n][4])
        alone = run_cenattn(embeds[n], weights, p.locals[n])
        assert np.max(np.abs(fed.states[n][4] - alone.final_state())) <= 1e-12


def test_block_diagonal_full_sync_equals_local(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)

    diagonal = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(block_diagonal=True, threads=1))
    loc = run_locattn(embeds, weights, p, FedOptions(threads=1))

    assert np.max(np.abs(diagonal.final_state() - loc.final_state())) <= 1e-12
    assert sum(diagonal.bits_sent) > 0


def test_thread_count_does_not_change_the_trace(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    sched = uniform_schedule(4, 2)
    base = dict(local_token_ratio=0.75, kv_exchange_ratio=0.5, seed=3)

    one = run_fedattn(embeds, weights, p, sched, FedOptions(threads=1, **base))
    four = run_fedattn(embeds, weights, p, sched, FedOptions(threads=4, **base))

    assert np.array_equal(one.final_state(), four.final_state())
    assert one.bits_sent == four.bits_sent
    assert [m.dict() for m in one.messages] == [m.dict() for m in four.messages]


def test_sync_improves_on_local(weights, corpus):
    p, x, embeds = setup_run(weights, corpus)
    cen = run_cenattn(x, weights).final_state()

    def dev(trace):
        return float(np.linalg.norm(trace.final_state() - cen))

    local = dev(run_fedattn(embeds, weights, p, empty_schedule(4), FedOptions(threads=1)))
    full = dev(run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(threads=1)))

    assert full <= 1e-9 < local


def test_dense_bits_and_flops(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 2), FedOptions(wire_bits=16, threads=1))

    for n, size in enumerate(p.sizes):
        assert trace.bits_sent[n] == 2 * (2 * size * 8 * 16) * (p.N - 1)
        assert trace.bits_received[n] == sum(2 * 2 * s * 8 * 16 for k, s in enumerate(p.sizes) if k != n)

    L = p.L
    n = 0
    expected = 2 * block_flops(p.sizes[n], p.sizes[n], 8, 16) + 2 * block_flops(p.sizes[n], L, 8, 16)
    assert trace.flops_prefill[n] == expected
    assert sum(trace.bits_sent) == sum(trace.bits_received)


def test_sparse_kv_exchange_bits(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 2), FedOptions(kv_exchange_ratio=0.5, threads=1))

    for n, size in enumerate(p.sizes):
        sent = math.ceil(size / 2)
        assert trace.bits_sent[n] == 2 * (2 * sent * 8 * 16) * (p.N - 1)

    assert sorted(trace.aggregates) == [2, 4]
    assert all(m.count == math.ceil(p.sizes[m.sender] / 2) for m in trace.messages)


def test_sparse_local_tokens(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(local_token_ratio=0.5, threads=1))

    assert [len(s) for s in trace.survivors] == [max(1, math.ceil(s / 2)) for s in p.sizes]
    assert trace.final_state().shape == (len(trace.surviving), 8)

    with pytest.raises(IncompleteTableError):
        trace.global_state(5)


def test_star_topology(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 4), FedOptions(topology=Topology.STAR, threads=1))

    payloads = [2 * s * 8 * 16 for s in p.sizes]
    assert trace.bits_sent == payloads
    assert trace.relay_bits == sum(payloads) * p.N


def test_publisher_interval(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    union, per = publisher_schedule(4, 4, 2, p.publisher, p.N)

    trace = run_fedattn(embeds, weights, p, union, FedOptions(per_participant_schedules=per, threads=1))

    assert [m.block for m in trace.messages if m.sender == p.publisher] == [2, 4]
    assert [m.block for m in trace.messages if m.sender == 0] == [4]
    assert trace.schedules[0] == (4,)


def test_input_errors(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)

    with pytest.raises(ScheduleError):
        run_fedattn(embeds, weights, p, uniform_schedule(8, 2))

    with pytest.raises(ShapeError):
        run_fedattn(embeds[:2], weights, p, uniform_schedule(4, 2))


def test_decode_matches_centralized_at_full_sync(weights, corpus):
    p, x, embeds = setup_run(weights, corpus)
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(threads=1))

    tokens = decode_greedy(trace, weights, p, 5)
    reference = cen_decode(run_cenattn(x, weights), weights, 5, start_pos=p.L)

    assert tokens == reference.tokens
    assert trace.handoff_bits == 0
    assert len(trace.decode_flops_per_step) == 4
    assert decode_greedy(trace, weights, p, 0) == []


def test_decode_hands_off_the_last_token(weights):
    p = Partition.from_locals([[0, 1, 2, 5], [3, 4]])
    tokens = [3, 1, 4, 1, 5, 9]
    x = embed_tokens(tokens, range(6), weights)
    trace = run_fedattn([gather(x, p, n) for n in range(2)], weights, p, uniform_schedule(4, 2), FedOptions(threads=1))

    assert len(decode_greedy(trace, weights, p, 3)) == 3
    assert trace.handoff_bits == 8 * 16


def test_one_round_is_local_until_the_last_block(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)
    opts = FedOptions(threads=1)

    fed = run_fedattn(embeds, weights, p, uniform_schedule(4, 4), opts)
    loc = run_locattn(embeds, weights, p, opts)

    for n in range(p.N):
        for m in range(4):
            assert np.array_equal(fed.states[n][m], loc.states[n][m])

    # the publisher holds the last segment and attends to every earlier token at block 4
    publisher = p.publisher
    assert np.max(np.abs(fed.states[publisher][4] - loc.states[publisher][4])) > 1e-9
    assert [m.block for m in fed.messages] == [4, 4, 4]


def test_zero_kv_exchange_is_local_attention(weights, corpus):
    p, _, embeds = setup_run(weights, corpus)

    silent = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(kv_exchange_ratio=0.0, threads=1))
    loc = run_locattn(embeds, weights, p, FedOptions(threads=1))

    assert silent.messages == []
    assert silent.bits_sent == [0, 0, 0] and silent.bits_received == [0, 0, 0]
    assert all(len(silent.aggregates[m]) == 0 for m in range(1, 5))
    assert np.max(np.abs(silent.final_state() - loc.final_state())) <= 1e-12


@pytest.mark.parametrize('kv_exchange_ratio', [1.0, 0.5])
def test_every_round_delivers_what_was_sent(weights, corpus, kv_exchange_ratio):
    p, _, embeds = setup_run(weights, corpus)
    trace = run_fedattn(
        embeds, weights, p, uniform_schedule(4, 2), FedOptions(kv_exchange_ratio=kv_exchange_ratio, threads=1))

    for m in trace.schedule.sync_blocks:
        sent = sum(msg.count * (p.N - 1) for msg in trace.messages if msg.block == m)
        received = sum(len(trace.caches[n][m - 1]) - len(trace.survivors[n]) for n in range(p.N))

        assert sent == received > 0


@pytest.mark.parametrize('block_diagonal', [False, True])
def test_participant_labels_do_not_matter(weights, corpus, block_diagonal):
    p, x, embeds = setup_run(weights, corpus)
    relabeled = Partition.from_locals(list(reversed(p.locals)))
    opts = FedOptions(block_diagonal=block_diagonal, threads=1)

    fed = run_fedattn(embeds, weights, p, uniform_schedule(4, 2), opts)
    swapped = run_fedattn(
        [gather(x, relabeled, n) for n in range(p.N)], weights, relabeled, uniform_schedule(4, 2), opts)

    for m in range(5):
        assert np.max(np.abs(fed.global_state(m) - swapped.global_state(m))) <= 1e-12

    owners = run_cenattn(x, weights, owner=p.assign if block_diagonal else None)
    relabeled_owners = run_cenattn(x, weights, owner=relabeled.assign if block_diagonal else None)
    assert np.array_equal(owners.final_state(), relabeled_owners.final_state())


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(20))
def test_degenerate_schedules_on_a_full_size_model(seed):
    config = ModelConfig(d=32, d_ff=64, M=8, vocab=64, seed=seed)
    weights = init_weights(config)
    corpus = gen_corpus(4, (24, 28), config.vocab, seed)
    p, x, embeds = setup_run(weights, corpus, N=4)
    opts = FedOptions(threads=1)

    synced = run_fedattn(embeds, weights, p, uniform_schedule(8, 1), opts)
    assert frob_dist(synced.final_state(), run_cenattn(x, weights).final_state()) <= 1e-9

    local = run_fedattn(embeds, weights, p, empty_schedule(8), opts)
    loc = run_locattn(embeds, weights, p, opts)
    for n in range(p.N):
        assert np.array_equal(local.states[n][8], loc.states[n][8])
