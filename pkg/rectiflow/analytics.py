"""
Run analytics: accuracy grading, iteration histograms, indicator-overlap
matrices and report files.
"""
import json
import logging
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from rectiflow.domain import (
    ConfigurationError,
    GateStatus,
    Trajectory,
    canonical_json,
    jaccard,
    normalize_answer,
)

logger = logging.getLogger(__name__)

REJECTED_BUCKET = 'rejected'


def _bucket(outcome) -> str:
    if outcome.status is GateStatus.REJECTED:
        return REJECTED_BUCKET
    return f"pass@{outcome.accepted_iteration + 1}"


def iteration_histogram(trajectories: Sequence[Trajectory],
                        t_max: Optional[int] = None) -> Dict[str, Tuple[int, float]]:
    """
    Bucket every gate outcome (discarded segments included) by the iteration
    it was accepted at. Keys are ordered pass@1..pass@k then 'rejected'.
    """
    counts = Counter(_bucket(step.outcome) for trajectory in trajectories for step in trajectory.all_steps())
    total = sum(counts.values())
    if total == 0:
        return OrderedDict()

    passes = [k for k in counts if k != REJECTED_BUCKET]
    highest = max((int(k.split('@')[1]) for k in passes), default=0)
    if t_max is not None:
        highest = max(highest, t_max + 1)
        labels = [f"pass@{k}" for k in range(1, highest + 1)] + [REJECTED_BUCKET]
    else:
        labels = sorted(passes, key=lambda k: int(k.split('@')[1]))
        if REJECTED_BUCKET in counts:
            labels.append(REJECTED_BUCKET)

    return OrderedDict((label, (counts.get(label, 0), counts.get(label, 0) / total)) for label in labels)


def histogram_frame(histogram: Mapping[str, Tuple[int, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [(label, count, fraction) for label, (count, fraction) in histogram.items()],
        columns=['bucket', 'count', 'fraction'],
    )
    return frame.set_index('bucket')


def retrieval_frequencies(trajectories: Sequence[Trajectory]) -> Counter:
    """Every retrieval occurrence counts, including repeats across iterations."""
    counts = Counter()
    for trajectory in trajectories:
        for step in trajectory.all_steps():
            for gate_round in step.outcome.history:
                counts.update(gate_round.active_indicators)
    return counts


def top_indicators(trajectories: Sequence[Trajectory], top_n: int = 10) -> List[str]:
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    counts = retrieval_frequencies(trajectories)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [name for name, _ in ranked[:top_n]]


def top_indicator_overlap(per_benchmark: Mapping[str, Sequence[Trajectory]], top_n: int = 10) -> pd.DataFrame:
    """Pair-wise Jaccard similarity of each benchmark's top_n retrieved indicators."""
    labels = list(per_benchmark)
    tops = {label: set(top_indicators(per_benchmark[label], top_n)) for label in labels}
    matrix = pd.DataFrame(index=labels, columns=labels, dtype=float)
    for a in labels:
        for b in labels:
            matrix.loc[a, b] = 1.0 if a == b else jaccard(tops[a], tops[b])
    return matrix


def grade_run(trajectories: Sequence[Trajectory]) -> Dict:
    """Exact-match accuracy after answer normalization; a missing answer is wrong."""
    missing = [t.task.id for t in trajectories if not t.task.gold_answer]
    if missing:
        raise ConfigurationError([f"task '{task_id}' has no gold_answer" for task_id in missing])

    per_task = []
    for trajectory in trajectories:
        predicted = normalize_answer(trajectory.final_answer)
        correct = bool(trajectory.final_answer) and predicted == normalize_answer(trajectory.task.gold_answer)
        per_task.append({'task_id': trajectory.task.id, 'correct': correct})

    correct = sum(1 for entry in per_task if entry['correct'])
    accuracy = correct / len(per_task) if per_task else 0.0
    return {'accuracy': accuracy, 'correct': correct, 'total': len(per_task), 'per_task': per_task}


def fallback_summary(trajectories: Sequence[Trajectory]) -> Dict[str, int]:
    return {
        'tasks': len(trajectories),
        'resets': sum(len(t.fallback_events) for t in trajectories),
        'tasks_with_reset': sum(1 for t in trajectories if t.fallback_events),
        'budget_exhausted': sum(1 for t in trajectories if t.fallback_exhausted),
    }


def build_report(trajectories: Sequence[Trajectory], t_max: Optional[int] = None,
                 grade: bool = True) -> Dict:
    histogram = iteration_histogram(trajectories, t_max)
    report = {
        'tasks': len(trajectories),
        'histogram': {label: {'count': c, 'fraction': f} for label, (c, f) in histogram.items()},
        'fallback': fallback_summary(trajectories),
    }
    if grade:
        report['grading'] = grade_run(trajectories)
    return report


def format_report(report: Dict, overlap: Optional[pd.DataFrame] = None) -> str:
    lines = [f"Tasks: {report['tasks']}"]
    grading = report.get('grading')
    if grading:
        lines.append(f"Accuracy: {grading['accuracy']:.4f} ({grading['correct']}/{grading['total']})")
    fallback = report['fallback']
    lines.append(f"Resets: {fallback['resets']}  Budget exhausted: {fallback['budget_exhausted']}")
    lines.append('')
    histogram = {label: (v['count'], v['fraction']) for label, v in report['histogram'].items()}
    if histogram:
        lines.append('Iteration histogram')
        lines.append(histogram_frame(histogram).to_string(float_format=lambda x: f"{x:.4f}"))
    else:
        lines.append('Iteration histogram: no gate outcomes')
    if overlap is not None:
        lines.append('')
        lines.append("Top indicator overlap (Jaccard)")
        lines.append(overlap.to_string(float_format=lambda x: f"{x:.4f}"))
    return '\n'.join(lines) + '\n'


def write_report(out_dir: Union[str, Path], report: Dict,
                 overlap: Optional[pd.DataFrame] = None) -> Dict[str, Path]:
    """Write report.json, report.txt and, when given, overlap.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {'json': out_dir / 'report.json', 'text': out_dir / 'report.txt'}

    payload = dict(report)
    if overlap is not None:
        payload['overlap'] = json.loads(overlap.to_json(orient='index'))
    paths['json'].write_text(canonical_json(payload) + '\n', encoding='utf-8')
    paths['text'].write_text(format_report(report, overlap), encoding='utf-8')
    if overlap is not None:
        paths['csv'] = out_dir / 'overlap.csv'
        overlap.to_csv(paths['csv'], float_format='%.6f')

    logger.info(f"Report written to {out_dir}")
    return paths
