"""Отчёт приёмки: квантизатор-кандидат против базового по общим seed"""
import argparse
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Tuple

import config as settings
from core.errors import ConfigError
from handlers.common import run_guarded, write_lines
from utils.formatters import format_record, parse_record

logger = logging.getLogger(__name__)

SEED_DIR = re.compile(r'^seed(\d+)$')
# допустимый проигрыш по MSE относительно базового квантизатора
MSE_RATIO = 1.2


@dataclass
class RunMetrics:
    """metrics.txt и train.log одного прогона"""
    quantizer: str
    seed: int
    metrics: Dict[Tuple[str, str], float] = field(default_factory=dict)
    steps: int = 0
    final_loss: float = math.nan

    def get(self, name: str, split: str = 'clean') -> float:
        return self.metrics.get((name, split), math.nan)

    @property
    def silhouette_drop(self) -> float:
        return self.get('silhouette', 'clean') - self.get('silhouette', 'corrupted')


class Criterion(NamedTuple):
    name: str
    rule: str
    value: Callable[[RunMetrics], float]
    holds: Callable[[float, float, float], bool]


CRITERIA = [
    Criterion('silhouette', 'higher', lambda run: run.get('silhouette'), lambda c, b, ratio: c > b),
    Criterion('davies_bouldin', 'lower', lambda run: run.get('davies_bouldin'), lambda c, b, ratio: c < b),
    Criterion('perplexity', 'higher', lambda run: run.get('perplexity'), lambda c, b, ratio: c > b),
    Criterion('reconstruction_mse', 'within_ratio', lambda run: run.get('reconstruction_mse'),
              lambda c, b, ratio: c <= ratio * b),
    Criterion('silhouette_drop', 'smaller', lambda run: run.silhouette_drop, lambda c, b, ratio: c < b),
]


@dataclass(frozen=True)
class Comparison:
    criterion: str
    seed: int
    candidate: float
    baseline: float
    passed: bool


def _read_records(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        raise ConfigError(f"run output is missing: {path}")
    with open(path, encoding='utf-8') as f:
        return [parse_record(line) for line in f if line.strip()]


def _to_float(text: str, path: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: bad numeric value {text!r}")


def list_seeds(runs_dir: str, quantizer: str) -> List[int]:
    root = os.path.join(runs_dir, quantizer)
    if not os.path.isdir(root):
        raise ConfigError(f"no runs for {quantizer} in {runs_dir}")
    return sorted(int(m.group(1)) for m in map(SEED_DIR.match, os.listdir(root)) if m)


def load_run(runs_dir: str, quantizer: str, seed: int) -> RunMetrics:
    run_dir = os.path.join(runs_dir, quantizer, f"seed{seed}")
    run = RunMetrics(quantizer, seed)

    metrics_path = os.path.join(run_dir, settings.METRICS_FILE)
    for record in _read_records(metrics_path):
        if 'name' in record and 'split' in record:
            run.metrics[(record['name'], record['split'])] = _to_float(record.get('value'), metrics_path)

    log_path = os.path.join(run_dir, settings.TRAIN_LOG_FILE)
    for record in _read_records(log_path):
        if 'step' in record:
            run.steps += 1
        elif record.get('name') == 'final_loss':
            run.final_loss = _to_float(record.get('value'), log_path)
    return run


def compare_runs(candidate: RunMetrics, baseline: RunMetrics, mse_ratio: float = MSE_RATIO) -> List[Comparison]:
    """NaN на любой стороне и разошедшееся обучение кандидата дают fail"""
    diverged = not math.isfinite(candidate.final_loss)
    comparisons = []
    for criterion in CRITERIA:
        c, b = criterion.value(candidate), criterion.value(baseline)
        passed = not diverged and bool(criterion.holds(c, b, mse_ratio))
        comparisons.append(Comparison(criterion.name, candidate.seed, c, b, passed))
    return comparisons


def majority(comparisons: List[Comparison]) -> Dict[str, Tuple[int, int]]:
    """criterion -> (число seed с pass, число сравнённых seed)"""
    tally: Dict[str, Tuple[int, int]] = {}
    for comparison in comparisons:
        passed, total = tally.get(comparison.criterion, (0, 0))
        tally[comparison.criterion] = (passed + int(comparison.passed), total + 1)
    return tally


def report_lines(pairs: List[Tuple[RunMetrics, RunMetrics]], mse_ratio: float = MSE_RATIO) -> List[str]:
    if not pairs:
        raise ConfigError("no seed was run for both quantizers")
    candidate_name, baseline_name = pairs[0][0].quantizer, pairs[0][1].quantizer
    rules = {c.name: c.rule for c in CRITERIA}
    lines, comparisons = [], []
    for candidate, baseline in pairs:
        lines.append(format_record(seed=candidate.seed, candidate=candidate_name, candidate_steps=candidate.steps,
                                   candidate_final_loss=candidate.final_loss, baseline=baseline_name,
                                   baseline_steps=baseline.steps, baseline_final_loss=baseline.final_loss))
        for comparison in compare_runs(candidate, baseline, mse_ratio):
            comparisons.append(comparison)
            lines.append(format_record(criterion=comparison.criterion, rule=rules[comparison.criterion],
                                       seed=comparison.seed, candidate=comparison.candidate,
                                       baseline=comparison.baseline,
                                       result='pass' if comparison.passed else 'fail'))

    held = 0
    for name, (passed, total) in majority(comparisons).items():
        ok = 2 * passed > total
        held += int(ok)
        lines.append(format_record(criterion=name, seeds_passed=passed, seeds=total,
                                   verdict='pass' if ok else 'fail'))
    lines.append(format_record(verdict='pass' if held == len(CRITERIA) else 'fail', candidate=candidate_name,
                               baseline=baseline_name, criteria_passed=held, criteria=len(CRITERIA),
                               mse_ratio=mse_ratio))
    return lines


async def cmd_report(runs_dir: str, candidate: str, baseline: str, mse_ratio: float = MSE_RATIO) -> dict:
    if candidate == baseline:
        raise ConfigError(f"candidate and baseline are both {candidate}")
    if not (mse_ratio > 0 and math.isfinite(mse_ratio)):
        raise ConfigError(f"mse ratio must be positive, got {mse_ratio}")
    candidate_seeds, baseline_seeds = set(list_seeds(runs_dir, candidate)), set(list_seeds(runs_dir, baseline))
    seeds = sorted(candidate_seeds & baseline_seeds)
    skipped = sorted(candidate_seeds ^ baseline_seeds)
    if skipped:
        logger.warning(f"Seeds run for only one quantizer are skipped: {skipped}")

    pairs = [(load_run(runs_dir, candidate, s), load_run(runs_dir, baseline, s)) for s in seeds]
    lines = report_lines(pairs, mse_ratio)
    path = os.path.join(runs_dir, settings.REPORT_FILE)
    await write_lines(path, lines)
    for line in lines:
        print(line)
    print(settings.STATUS_COMPLETE.format(path=path))
    return {'report': path, 'lines': lines, 'passed': lines[-1].startswith('verdict=pass')}


async def handle(args: argparse.Namespace) -> int:
    await cmd_report(args.runs, args.candidate, args.baseline, args.mse_ratio)
    return settings.EXIT_OK


def register(subparsers):
    parser = subparsers.add_parser('report', help='compare a candidate quantizer with a baseline across seeds')
    parser.add_argument('--runs', default='runs', help='directory holding <quantizer>/seed<N>/ run outputs')
    parser.add_argument('--candidate', default='hypervq')
    parser.add_argument('--baseline', default='kmeansvq')
    parser.add_argument('--mse-ratio', type=float, default=MSE_RATIO, dest='mse_ratio',
                        help='candidate MSE may be at most this multiple of the baseline MSE')
    parser.set_defaults(func=lambda args: run_guarded('report', handle, args))
