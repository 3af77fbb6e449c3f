import asyncio
import math
import os

import pytest

import hypervq
from core.errors import ConfigError
from handlers.report import RunMetrics, compare_runs, load_run, majority, report_lines
from utils.formatters import format_metric_record, format_record, parse_record

GOOD = {'silhouette': (0.40, 0.30), 'davies_bouldin': 0.9, 'perplexity': 12.0, 'reconstruction_mse': 0.011}
BASE = {'silhouette': (0.30, 0.15), 'davies_bouldin': 1.2, 'perplexity': 9.0, 'reconstruction_mse': 0.010}


def cli(*argv) -> int:
    return asyncio.run(hypervq.run(list(argv)))


def write_run(runs, quantizer, seed, values, final_loss=0.02):
    run_dir = runs / quantizer / f"seed{seed}"
    run_dir.mkdir(parents=True)
    lines = []
    for split, index in (('clean', 0), ('corrupted', 1)):
        lines.append(format_metric_record('silhouette', values['silhouette'][index], split=split,
                                          quantizer=quantizer, space='euclidean'))
        for name in ('davies_bouldin', 'perplexity', 'reconstruction_mse'):
            lines.append(format_metric_record(name, values[name], split=split, quantizer=quantizer))
    (run_dir / 'metrics.txt').write_text('\n'.join(lines) + '\n', encoding='utf-8')
    log = [format_record(step=s, loss=0.1, reconstruction_loss=0.1, aux_loss=0.0, perplexity=4.0, tau=None)
           for s in range(3)]
    log.append(format_metric_record('final_loss', final_loss, split='train'))
    (run_dir / 'train.log').write_text('\n'.join(log) + '\n', encoding='utf-8')


def run_of(values, quantizer='hypervq', seed=0, final_loss=0.02):
    run = RunMetrics(quantizer, seed, final_loss=final_loss, steps=3)
    for split, index in (('clean', 0), ('corrupted', 1)):
        run.metrics[('silhouette', split)] = values['silhouette'][index]
        for name in ('davies_bouldin', 'perplexity', 'reconstruction_mse'):
            run.metrics[(name, split)] = values[name]
    return run


def test_load_run_reads_metrics_and_log(tmp_path):
    write_run(tmp_path, 'hypervq', 3, GOOD, final_loss=0.5)
    run = load_run(str(tmp_path), 'hypervq', 3)
    assert run.get('silhouette', 'corrupted') == 0.30
    assert run.get('perplexity') == 12.0
    assert run.silhouette_drop == pytest.approx(0.10, abs=1e-15)
    assert run.steps == 3
    assert run.final_loss == 0.5
    assert math.isnan(run.get('codes_used'))


def test_every_criterion_passes_for_better_run():
    comparisons = compare_runs(run_of(GOOD), run_of(BASE, 'kmeansvq'))
    assert [c.criterion for c in comparisons] == [
        'silhouette', 'davies_bouldin', 'perplexity', 'reconstruction_mse', 'silhouette_drop']
    assert all(c.passed for c in comparisons)
    drop = comparisons[-1]
    assert drop.candidate == pytest.approx(0.10) and drop.baseline == pytest.approx(0.15)


def test_mse_ratio_bound():
    worse = dict(GOOD, reconstruction_mse=0.0121)
    by_name = {c.criterion: c for c in compare_runs(run_of(worse), run_of(BASE, 'kmeansvq'))}
    assert not by_name['reconstruction_mse'].passed
    by_name = {c.criterion: c for c in compare_runs(run_of(worse), run_of(BASE, 'kmeansvq'), mse_ratio=1.25)}
    assert by_name['reconstruction_mse'].passed


def test_nan_and_divergence_fail():
    nan_silhouette = dict(GOOD, silhouette=(math.nan, 0.3))
    by_name = {c.criterion: c for c in compare_runs(run_of(nan_silhouette), run_of(BASE, 'kmeansvq'))}
    assert not by_name['silhouette'].passed
    assert not by_name['silhouette_drop'].passed
    assert by_name['perplexity'].passed

    diverged = compare_runs(run_of(GOOD, final_loss=math.nan), run_of(BASE, 'kmeansvq'))
    assert not any(c.passed for c in diverged)


def test_seed_majority_verdict():
    worse = dict(GOOD, perplexity=5.0)
    pairs = [(run_of(GOOD, seed=0), run_of(BASE, 'kmeansvq', 0)),
             (run_of(worse, seed=1), run_of(BASE, 'kmeansvq', 1)),
             (run_of(GOOD, seed=2), run_of(BASE, 'kmeansvq', 2))]
    tally = majority([c for cand, base in pairs for c in compare_runs(cand, base)])
    assert tally['perplexity'] == (2, 3)
    assert tally['silhouette'] == (3, 3)

    verdict = parse_record(report_lines(pairs)[-1])
    assert verdict['verdict'] == 'pass'
    assert verdict['criteria_passed'] == '5'

    pairs[2] = (run_of(worse, seed=2), run_of(BASE, 'kmeansvq', 2))
    records = [parse_record(line) for line in report_lines(pairs)]
    perplexity = [r for r in records if r.get('criterion') == 'perplexity' and 'verdict' in r][0]
    assert perplexity['seeds_passed'] == '1' and perplexity['verdict'] == 'fail'
    assert records[-1]['verdict'] == 'fail'


def test_report_command(tmp_path):
    for seed in (0, 1):
        write_run(tmp_path, 'hypervq', seed, GOOD)
        write_run(tmp_path, 'kmeansvq', seed, BASE)
    write_run(tmp_path, 'hypervq', 5, GOOD)
    assert cli('report', '--runs', str(tmp_path)) == 0

    with open(os.path.join(tmp_path, 'report.txt'), encoding='utf-8') as f:
        records = [parse_record(line) for line in f if line.strip()]
    per_seed = [r for r in records if 'result' in r]
    assert len(per_seed) == 2 * 5
    assert {r['seed'] for r in per_seed} == {'0', '1'}
    assert records[-1]['verdict'] == 'pass'
    assert records[-1]['candidate'] == 'hypervq' and records[-1]['baseline'] == 'kmeansvq'


def test_report_errors_exit_with_two(tmp_path):
    assert cli('report', '--runs', str(tmp_path)) == 2
    write_run(tmp_path, 'hypervq', 0, GOOD)
    write_run(tmp_path, 'kmeansvq', 1, BASE)
    assert cli('report', '--runs', str(tmp_path)) == 2
    assert cli('report', '--runs', str(tmp_path), '--baseline', 'hypervq') == 2
    os.remove(tmp_path / 'hypervq' / 'seed0' / 'train.log')
    with pytest.raises(ConfigError):
        load_run(str(tmp_path), 'hypervq', 0)
