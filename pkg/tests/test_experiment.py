import json
import os

import pytest

from pyfedattn.errors import ConfigError, ExitCode
from pyfedattn.experiment import (
    GRID_COLUMNS,
    RUN_COLUMNS,
    SUMMARY_COLUMNS,
    ExperimentSpec,
    GridPoint,
    build_schedule,
    emit_bounds,
    grid,
    iter_rows,
    load_spec,
    run_experiment,
)
from pyfedattn.partition import Strategy


def small_spec(tmp_path, **changes) -> dict:
    spec = {
        'name': 'small',
        'model': {'d': 8, 'd_ff': 16, 'M': 4, 'vocab': 20},
        'corpus': {'shots': 3, 'unit_len_min': 3, 'unit_len_max': 5},
        'strategies': ['TokSeg_QAg'],
        'sweep': {'H': [1], 'N': [3]},
        'seeds': [0],
        'max_new': 3,
        'out': str(tmp_path),
        'threads': 1
    }
    spec.update(changes)
    return spec


def read(path) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def test_grid_order():
    spec = ExperimentSpec(
        strategies=['TokSeg_QAg', 'SemSeg_QEx'],
        sweep={'H': [1, 2], 'N': [2, 4]},
        out='unused'
    )
    points = grid(spec)

    assert len(points) == 8
    assert points[0] == GridPoint(Strategy.TokSeg_QAg, 2, 1, 'uniform', 1.0, 1.0, None)
    assert points[1].H == 2
    assert points[2].N == 4
    assert points[4].strategy == Strategy.SemSeg_QEx
    assert list(points[0].columns()) == GRID_COLUMNS


def test_build_schedule():
    point = GridPoint(Strategy.TokSeg_QAg, 3, 2, 'uniform', 1.0, 1.0, None)

    assert build_schedule(8, point)[0].sync_blocks == (2, 4, 6, 8)
    assert build_schedule(8, point._replace(schedule='local'))[0].T == 0
    assert build_schedule(16, point._replace(H=4, schedule='Progressive'))[0].sync_blocks == (1, 4, 9, 16)

    union, per = build_schedule(8, point._replace(H=4, publisher_H=2))
    assert union.sync_blocks == (2, 4, 6, 8)
    assert per[2] == [2, 4, 6, 8] and per[0] == [4, 8]

    with pytest.raises(ConfigError):
        build_schedule(8, point._replace(schedule='DeepHalf', publisher_H=2))


def test_spec_validation_names_the_field(tmp_path):
    with pytest.raises(ConfigError) as e:
        run_experiment(small_spec(tmp_path, sweep={'H': [0]}))

    assert e.value.code == ExitCode.CONFIG
    assert e.value.details['field'].startswith('sweep.H')

    with pytest.raises(ConfigError) as e:
        run_experiment(small_spec(tmp_path, strategies=['Round-Robin']))
    assert e.value.details['field'].startswith('strategies')

    with pytest.raises(ConfigError):
        run_experiment(small_spec(tmp_path, sweep={'schedule': ['sometimes']}))

    with pytest.raises(ConfigError):
        run_experiment(small_spec(tmp_path, seeds=[]))

    with pytest.raises(ConfigError):
        run_experiment(small_spec(tmp_path, unknown=1))


def test_load_spec(tmp_path):
    path = tmp_path / 'spec.json'
    path.write_text(json.dumps(small_spec(tmp_path / 'out')))

    spec = load_spec(str(path), seeds=[3, 4], threads=None)
    assert spec.seeds == [3, 4]
    assert spec.threads == 1

    with pytest.raises(ConfigError):
        load_spec(str(tmp_path / 'missing.json'))

    bad = tmp_path / 'bad.json'
    bad.write_text('{"seeds": [0,')
    with pytest.raises(ConfigError):
        load_spec(str(bad))

    listed = tmp_path / 'list.json'
    listed.write_text('[1, 2]')
    with pytest.raises(ConfigError):
        load_spec(str(listed))


def test_single_point_single_seed(tmp_path):
    result = run_experiment(small_spec(tmp_path))

    assert result.exit_code == ExitCode.OK
    assert len(result.rows) == 1
    assert len(result.summary) == 1

    row = result.rows[0]
    assert row['status'] == 'ok'
    assert row['deviation'] <= 1e-9
    assert row['decode_agreement'] == 1.0
    assert row['sync_blocks'] == '1;2;3;4'
    assert row['bits_sent_total'] > 0
    assert len(row['sigma_profile'].split(';')) == 4

    assert result.files == [os.path.join(str(tmp_path), 'runs.csv'), os.path.join(str(tmp_path), 'summary.csv')]
    runs = list(iter_rows(result.files[0]))
    assert list(runs[0]) == RUN_COLUMNS
    assert runs[0]['strategy'] == 'TokSeg_QAg'

    summary = list(iter_rows(result.files[1]))
    assert list(summary[0]) == SUMMARY_COLUMNS
    assert summary[0]['seeds'] == '1'
    assert summary[0]['failed'] == '0'


def test_summary_statistics(tmp_path):
    result = run_experiment(small_spec(tmp_path, seeds=[0, 1, 2], sweep={'H': [2], 'N': [3]}))
    s = result.summary[0]

    assert s['seeds'] == 3
    assert s['deviation_min'] <= s['deviation_mean'] <= s['deviation_max']
    assert s['deviation_max'] > 0.0
    assert s['deviation_min'] == min(r['deviation'] for r in result.rows)


def test_local_runs_deviate_more_than_synced(tmp_path):
    result = run_experiment(small_spec(tmp_path, sweep={'H': [1], 'N': [3], 'schedule': ['uniform', 'local']}))
    synced, local = result.rows

    assert synced['deviation'] < local['deviation']
    assert local['bits_sent_total'] == 0
    assert local['sync_blocks'] == ''


def test_sparse_local_rows_report_the_dropped_context(tmp_path):
    result = run_experiment(small_spec(tmp_path, sweep={'H': [1], 'N': [3], 'local_token_ratio': [1.0, 0.5]}))
    dense, sparse = result.rows

    assert dense['deviation'] <= 1e-9
    assert sparse['deviation'] > 1e-6
    assert 0.0 <= sparse['decode_agreement'] <= 1.0


@pytest.mark.slow
def test_longer_rounds_trade_accuracy_for_traffic(tmp_path):
    spec = {
        'name': 'h-trend',
        'strategies': [s.value for s in Strategy],
        'sweep': {'H': [1, 2, 4, 8], 'N': [4]},
        'seeds': list(range(10)),
        'metrics': ['deviation', 'cost'],
        'out': str(tmp_path),
        'threads': 4
    }
    result = run_experiment(spec)
    assert result.exit_code == ExitCode.OK

    for strategy in Strategy:
        summary = [s for s in result.summary if s['strategy'] == strategy.value]
        deviation = [s['deviation_mean'] for s in summary]
        bits = [s['bits_per_participant_mean'] for s in summary]

        assert [s['H'] for s in summary] == [1, 2, 4, 8]
        assert deviation[0] <= 1e-9
        assert all(a <= b for a, b in zip(deviation, deviation[1:]))
        assert all(a > b for a, b in zip(bits, bits[1:]))


def test_output_is_independent_of_threads(tmp_path):
    sweep = {'H': [1, 2, 4], 'N': [2, 3], 'kv_exchange_ratio': [1.0, 0.5]}
    one = run_experiment(small_spec(tmp_path / 'one', sweep=sweep, seeds=[0, 1], threads=1))
    four = run_experiment(small_spec(tmp_path / 'four', sweep=sweep, seeds=[0, 1], threads=4))

    assert read(one.files[0]) == read(four.files[0])
    assert read(one.files[1]) == read(four.files[1])


def test_infeasible_points_become_error_rows(tmp_path):
    spec = small_spec(tmp_path, strategies=['SemSeg_QAg'], sweep={'H': [1, 3], 'N': [3, 9]})
    result = run_experiment(spec)

    statuses = [r['status'] for r in result.rows]
    assert statuses == ['ok', 'error:CONFIG', 'error:CONFIG', 'error:CONFIG']
    assert result.exit_code == ExitCode.CONFIG
    assert result.summary[1]['failed'] == 1
    assert result.summary[1]['deviation_mean'] == ''
    assert os.path.exists(result.files[0])


def test_cost_only_metrics_skip_the_reference(tmp_path):
    result = run_experiment(small_spec(tmp_path, metrics=['cost'], sweep={'H': [2], 'N': [3]}))
    row = result.rows[0]

    assert row['deviation'] == ''
    assert row['decode_agreement'] == ''
    assert row['bits_per_participant'] > 0
    assert row['peak_scalars_max'] >= row['peak_scalars_mean']


def test_emit_bounds(tmp_path):
    spec = small_spec(tmp_path, sweep={'H': [1, 2, 4], 'N': [3], 'local_token_ratio': [1.0, 0.5]})
    result = emit_bounds(spec)

    assert result.exit_code == ExitCode.OK
    assert [r['H'] for r in result.rows] == [1, 2, 4]

    for row in result.rows:
        assert row['recursion_ok'] is True
        assert row['theorem1'] >= row['measured'] - 1e-9
        assert row['theorem3'] == pytest.approx(row['theorem1'], rel=1e-9, abs=1e-12)
        assert row['corollary1'] >= row['theorem1'] - 1e-12

    assert result.rows[0]['theorem1'] == 0.0

    blocks = list(iter_rows(result.files[1]))
    assert len(blocks) == 3 * 4
    assert blocks[0]['m'] == '1'


def test_emit_bounds_leaves_inapplicable_columns_empty(tmp_path):
    spec = small_spec(tmp_path, sweep={'H': [2], 'N': [3], 'schedule': ['Progressive'], 'kv_exchange_ratio': [1.0, 0.5]})
    dense, sparse = emit_bounds(spec).rows

    assert dense['theorem1'] == '' and dense['corollary1'] == ''
    assert dense['theorem3'] >= dense['measured'] - 1e-9
    assert sparse['theorem3'] == ''
    assert sparse['recursion_ok'] is True
