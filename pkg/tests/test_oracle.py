import io

import numpy as np
import pytest

from pyfedattn.errors import ShapeError, IncompleteTableError
from pyfedattn.model import ModelConfig, init_weights, embed_tokens
from pyfedattn.oracle import (
    DEVIATION_COLUMNS,
    attention_mass,
    cen_decode,
    measure_sigma,
    round_position,
    run_cenattn,
    run_locattn,
)
from pyfedattn.partition import Strategy, gen_corpus, make_partition, gather
from pyfedattn.protocol import FedOptions, SyncSchedule, empty_schedule, run_fedattn, uniform_schedule

CONFIG = ModelConfig(d=8, d_ff=16, M=4, vocab=20, seed=2)


@pytest.fixture(scope='module')
def setup():
    weights = init_weights(CONFIG)
    corpus = gen_corpus(3, (3, 5), CONFIG.vocab, 8)
    p = make_partition(corpus, 3, Strategy.TokSeg_QAg)
    x = embed_tokens(corpus.tokens, range(corpus.L), weights)
    return weights, p, x, [gather(x, p, n) for n in range(p.N)]


def test_round_position():
    sched = uniform_schedule(8, 2)

    assert [round_position(sched, m) for m in range(1, 9)] == [
        (0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)
    ]
    assert round_position(SyncSchedule(6, (1, 4)), 6) == (2, 2)


def test_cenattn_shapes_and_prefix(setup):
    weights, p, x, _ = setup
    cen = run_cenattn(x, weights)

    assert cen.M == 4
    assert len(cen.caches) == 4
    assert cen.caches[0].globals.tolist() == list(range(p.L))

    partial = run_cenattn(x, weights, n_blocks=2)
    assert partial.M == 2
    assert np.array_equal(partial.states[2], cen.states[2])

    assert run_cenattn(x, weights, n_blocks=0).M == 0


def test_cenattn_input_errors(setup):
    weights, _, x, _ = setup

    with pytest.raises(ShapeError):
        run_cenattn(x[:, :4], weights)

    with pytest.raises(ShapeError):
        run_cenattn(x, weights, positions=[0, 1])


def test_centrace_rows(setup):
    weights, _, x, _ = setup
    cen = run_cenattn(x[[0, 2, 5], :], weights, positions=[0, 2, 5])

    assert cen.rows([2, 5]).tolist() == [1, 2]

    with pytest.raises(ShapeError):
        cen.rows([3])


def test_cen_decode_starts_after_the_last_position(setup):
    weights, p, x, _ = setup
    cen = run_cenattn(x, weights)

    assert cen_decode(cen, weights, 4).tokens == cen_decode(cen, weights, 4, start_pos=p.L).tokens


def test_full_sync_has_no_deviation(setup):
    weights, p, _, embeds = setup
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(threads=1))
    report = measure_sigma(weights, trace, p)

    assert np.max(report.state_dev) <= 1e-9
    assert np.max(report.attn_dev) <= 1e-9
    assert np.max(report.participant_dev) <= 1e-9
    # the first segment sees its whole causal context locally
    assert np.max(report.sigma[:, 0]) <= 1e-12
    assert report.sigma_sum(1) > 0


def test_local_run_deviation(setup):
    weights, p, _, embeds = setup
    trace = run_locattn(embeds, weights, p, FedOptions(threads=1))
    report = measure_sigma(weights, trace, p)

    assert report.state_dev[0] == 0.0
    assert report.state_dev[4] > 0.0
    assert np.allclose(report.attn_dev ** 2, np.sum(report.sigma ** 2, axis=1), rtol=1e-9, atol=1e-15)
    assert np.allclose(report.state_dev ** 2, np.sum(report.participant_dev ** 2, axis=1), rtol=1e-9, atol=1e-15)


def test_deviation_csv(setup):
    weights, p, _, embeds = setup
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 2), FedOptions(threads=1))
    report = measure_sigma(weights, trace, p)

    with io.StringIO() as s:
        report.to_csv(s)
        lines = s.getvalue().splitlines()

    assert lines[0] == ','.join(DEVIATION_COLUMNS)
    assert len(lines) == 1 + 4 * 3
    assert lines[1].startswith('0,1,1,0,')
    assert report.dict()['state_dev'][0] == 0.0


def test_measure_sigma_rejects_mismatched_model(setup):
    weights, p, _, embeds = setup
    trace = run_locattn(embeds, weights, p, FedOptions(threads=1))
    other = init_weights(CONFIG.copy(update={'M': 2}))

    with pytest.raises(IncompleteTableError):
        measure_sigma(other, trace, p)


def test_attention_mass(setup):
    weights, p, _, embeds = setup
    trace = run_fedattn(embeds, weights, p, empty_schedule(4), FedOptions(threads=1))
    mass = attention_mass(weights, trace, p, 1)

    assert np.allclose(mass.sum(axis=1), 1.0)
    assert mass[0, 0] == pytest.approx(1.0)
    assert mass[0, 1] == 0.0 and mass[0, 2] == 0.0
    assert mass[2, 0] > 0.0

    with pytest.raises(IncompleteTableError):
        attention_mass(weights, trace, p, 5)


def test_sparse_local_deviation_is_measured_against_the_full_prompt(setup):
    weights, p, x, embeds = setup
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 1), FedOptions(local_token_ratio=0.5, threads=1))
    assert len(trace.surviving) < p.L

    report = measure_sigma(weights, trace, p, run_cenattn(x, weights))

    assert report.state_dev[0] == 0.0
    assert report.state_dev[4] > 1e-6
    assert np.allclose(report.state_dev ** 2, np.sum(report.participant_dev ** 2, axis=1), rtol=1e-9, atol=1e-15)

    # over the kept tokens alone a fully synced run is exact, so the gap above is the dropped context
    kept = run_cenattn(trace.global_state(0), weights, trace.surviving)
    assert measure_sigma(weights, trace, p, kept).state_dev[4] <= 1e-9

    with pytest.raises(IncompleteTableError):
        measure_sigma(weights, trace, p)


def test_dense_run_reference_defaults_to_the_full_prompt(setup):
    weights, p, x, embeds = setup
    trace = run_fedattn(embeds, weights, p, uniform_schedule(4, 2), FedOptions(threads=1))

    implicit = measure_sigma(weights, trace, p)
    explicit = measure_sigma(weights, trace, p, run_cenattn(x, weights))

    assert np.array_equal(implicit.state_dev, explicit.state_dev)
