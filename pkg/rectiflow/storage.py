"""
File storage for datasets and trajectories.
Trajectories are written one file per task so concurrent runs never share a writer.
"""
import json
import logging
import re
from pathlib import Path
from typing import List, Tuple, Union

from rectiflow.domain import ConfigurationError, TaskSpec, Trajectory, canonical_json

logger = logging.getLogger(__name__)

_UNSAFE = re.compile(r'[^A-Za-z0-9._-]+')


def trajectory_filename(task_id: str) -> str:
    return f"{_UNSAFE.sub('_', task_id)}.jsonl"


def write_trajectory(out_dir: Union[str, Path], trajectory: Trajectory) -> Path:
    """Write <task_id>.jsonl holding one canonical JSON line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / trajectory_filename(trajectory.task.id)
    path.write_text(canonical_json(trajectory.to_dict()) + '\n', encoding='utf-8')
    logger.debug(f"Trajectory for task {trajectory.task.id} written to {path}")
    return path


def read_trajectory_file(path: Union[str, Path]) -> List[Trajectory]:
    trajectories = []
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if line.strip():
                trajectories.append(Trajectory.from_dict(json.loads(line)))
    return trajectories


def load_trajectories(path: Union[str, Path]) -> Tuple[List[Trajectory], List[Path]]:
    """
    Load every *.jsonl trajectory under a directory (or one file).
    Returns (trajectories, unreadable files); unreadable files are logged and skipped.
    """
    path = Path(path)
    if not path.exists():
        logger.error(f"Trajectory path does not exist: {path}")
        return [], [path]
    files = [path] if path.is_file() else sorted(path.glob('*.jsonl'))
    trajectories, unreadable = [], []
    for file_path in files:
        try:
            trajectories.extend(read_trajectory_file(file_path))
        except (OSError, ValueError, KeyError, TypeError) as e:
            logger.error(f"Skipping unreadable trajectory file {file_path}: {e}")
            unreadable.append(file_path)
    logger.info(f"Loaded {len(trajectories)} trajectories from {path}")
    return trajectories, unreadable


def load_dataset(path: Union[str, Path], require_gold: bool = False) -> List[TaskSpec]:
    """Read {id, question, gold_answer} rows; every issue names its line."""
    tasks, issues = [], []
    seen = set()
    with open(path, encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                task = TaskSpec.from_dict(row)
            except json.JSONDecodeError as e:
                issues.append(f"dataset line {line_no}: invalid JSON ({e.msg})")
                continue
            except (KeyError, ValueError, TypeError) as e:
                issues.append(f"dataset line {line_no}: invalid row ({e})")
                continue
            if require_gold and not task.gold_answer:
                issues.append(f"dataset line {line_no}: task '{task.id}' has no gold_answer")
            if task.id in seen:
                issues.append(f"dataset line {line_no}: duplicate task id '{task.id}'")
            seen.add(task.id)
            tasks.append(task)
    if issues:
        raise ConfigurationError(issues)
    logger.info(f"Loaded {len(tasks)} tasks from {path}")
    return tasks
