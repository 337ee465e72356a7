#!/usr/bin/env python3
"""
Command-line entry point for the rectify-or-reject runtime.

    python cli.py run   --config C --dataset D [--pool P] --out DIR
    python cli.py mine  --config C --dataset D --pool-out P
    python cli.py stats TRAJ_DIR [--overlap label=dir ...] [--out DIR]
    python cli.py pool inspect --config C --pool P [--query TEXT] [--k N]
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from config import Config
from rectiflow.analytics import build_report, format_report, top_indicator_overlap, write_report
from rectiflow.domain import ConfigurationError, TaskSpec, Trajectory
from rectiflow.indicator_pool import PoolFormatError, load_pool, nearest_neighbors
from rectiflow.miner import PoolBuilder
from rectiflow.runtime import TaskRunner, validate_roster
from rectiflow.storage import load_dataset, load_trajectories, write_trajectory
from rectiflow.system_config import (
    ExperimentConfig,
    build_registry,
    load_experiment_config,
    write_effective_config,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_CONFIG = 2


def configure_logging(level: str = None):
    logging.basicConfig(
        level=getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s: %(message)s',
    )


def _report_config_error(error: Exception) -> int:
    print("❌ Configuration error:", file=sys.stderr)
    issues = getattr(error, 'issues', None) or [str(error)]
    for issue in issues:
        print(f"   • {issue}", file=sys.stderr)
    return EXIT_CONFIG


def _load_experiment(config_path, seed, jobs) -> ExperimentConfig:
    return load_experiment_config(config_path, seed=seed, jobs=jobs)


def cmd_run(config_path: str, dataset_path: str, pool_path: Optional[str], out_dir: str,
            seed: int = None, jobs: int = None) -> int:
    """Run every dataset task through the gated team and write trajectories plus a report."""
    out_dir = Path(out_dir)
    try:
        experiment = _load_experiment(config_path, seed, jobs)
        run = experiment.run
        tasks = load_dataset(dataset_path)

        pool_file = Path(pool_path) if pool_path else experiment.pool_path
        pool = None
        if pool_file is not None:
            pool = load_pool(pool_file, run.embedding_dim)
        elif run.scrutiny_enabled and not run.zero_shot:
            raise ConfigurationError("gate.pool: no indicator pool given and zero_shot is false")

        registry = build_registry(experiment)
        issues = validate_roster(experiment.roster, experiment.routing, registry)
        if issues:
            raise ConfigurationError(issues)
    except (ConfigurationError, PoolFormatError, FileNotFoundError, ValueError) as e:
        return _report_config_error(e)

    write_effective_config(experiment, out_dir / 'effective_config.ini')
    runner = TaskRunner(registry, experiment.prompt_library())
    trajectory_dir = out_dir / 'trajectories'

    print(f"🚀 Running {len(tasks)} tasks with {len(experiment.roster)} agents (jobs={experiment.jobs})")

    def execute(task: TaskSpec) -> Optional[Trajectory]:
        try:
            trajectory = runner.run_task(task, experiment.roster, experiment.routing, pool, run)
        except ConfigurationError:
            raise
        except Exception as e:
            logger.error(f"Task {task.id} failed: {e}")
            return None
        write_trajectory(trajectory_dir, trajectory)
        return trajectory

    results: List[Optional[Trajectory]] = []
    try:
        if experiment.jobs > 1:
            with ThreadPoolExecutor(max_workers=experiment.jobs) as executor:
                results = list(executor.map(execute, tasks))
        else:
            for task in tasks:
                results.append(execute(task))
    except ConfigurationError as e:
        return _report_config_error(e)
    except KeyboardInterrupt:
        print("\n👋 Interrupted; trajectories written so far are kept")
        return EXIT_FAILURES

    trajectories = [t for t in results if t is not None]
    failed = len(results) - len(trajectories)
    graded = all(t.task.gold_answer for t in trajectories)
    report = build_report(trajectories, t_max=run.t_max, grade=graded)
    report['failed_tasks'] = failed
    write_report(out_dir, report)

    print(format_report(report))
    if failed:
        print(f"⚠️  {failed} task(s) failed; see log for details")
        return EXIT_FAILURES
    print(f"✅ Results written to {out_dir}")
    return EXIT_OK


def cmd_mine(config_path: str, dataset_path: str, pool_out: str, build_log: str = None,
             seed: int = None, jobs: int = None) -> int:
    """Build an indicator pool from the failures of a plain roll-out."""
    try:
        experiment = _load_experiment(config_path, seed, jobs)
        tasks = load_dataset(dataset_path, require_gold=True)
        registry = build_registry(experiment)
        issues = validate_roster(experiment.roster, experiment.routing, registry)
        for backend_id, key in ((experiment.run.teacher_backend_id, 'miner.teacher_backend'),
                                (experiment.run.dedup_backend_id, 'miner.dedup_backend')):
            if not registry.has(backend_id) and (key.endswith('teacher_backend') or experiment.run.dedup_enabled):
                issues.append(f"{key}: unknown backend '{backend_id}'")
        if issues:
            raise ConfigurationError(issues)
    except (ConfigurationError, FileNotFoundError, ValueError) as e:
        return _report_config_error(e)

    runner = TaskRunner(registry, experiment.prompt_library())
    builder = PoolBuilder(runner, experiment.run)
    print(f"⛏️  Mining indicators from {len(tasks)} tasks")
    try:
        stats = builder.build_pool(tasks, experiment.roster, experiment.routing, pool_out,
                                   build_log, jobs=experiment.jobs)
    except KeyboardInterrupt:
        print("\n👋 Interrupted; the partial pool file stays valid")
        return EXIT_FAILURES

    summary = ', '.join(f"{key}={value}" for key, value in stats.to_dict().items())
    print(f"📊 Pool stats: {summary}")
    print(f"✅ Pool written to {pool_out}")
    return EXIT_OK


def _parse_labeled_dirs(pairs: Sequence[str]):
    labeled = {}
    for pair in pairs:
        label, sep, directory = pair.partition('=')
        if not sep or not label or not directory:
            raise ConfigurationError(f"--overlap expects label=dir, got '{pair}'")
        labeled[label] = Path(directory)
    return labeled


def cmd_stats(trajectory_dir: str, overlap: Sequence[str] = (), out_dir: str = None,
              top_n: int = 10, t_max: int = None) -> int:
    """Histogram report for one trajectory directory, optional overlap matrix for labeled ones."""
    try:
        labeled = _parse_labeled_dirs(overlap)
    except ConfigurationError as e:
        return _report_config_error(e)

    trajectories, unreadable = load_trajectories(trajectory_dir)
    if not trajectories:
        logger.warning(f"No trajectories found in {trajectory_dir}")
        print(f"⚠️  No trajectories found in {trajectory_dir}")

    per_benchmark = {}
    for label, directory in labeled.items():
        loaded, bad = load_trajectories(directory)
        per_benchmark[label] = loaded
        unreadable.extend(bad)

    graded = bool(trajectories) and all(t.task.gold_answer for t in trajectories)
    report = build_report(trajectories, t_max=t_max, grade=graded)
    matrix = top_indicator_overlap(per_benchmark, top_n) if len(per_benchmark) >= 2 else None

    print(format_report(report, matrix))
    if out_dir:
        write_report(out_dir, report, matrix)

    if unreadable:
        print("❌ Unreadable trajectory files:")
        for path in unreadable:
            print(f"   • {path}")
        return EXIT_FAILURES
    return EXIT_OK


def cmd_pool_inspect(config_path: str, pool_path: str, query: str = None, k: int = 5,
                     seed: int = None) -> int:
    """Print pool entries and, with a query, its nearest indicators."""
    try:
        experiment = _load_experiment(config_path, seed, None)
        pool = load_pool(pool_path, experiment.run.embedding_dim)
        registry = build_registry(experiment)
    except (ConfigurationError, PoolFormatError, FileNotFoundError, ValueError) as e:
        return _report_config_error(e)

    print(f"📚 {len(pool)} indicators in {pool_path}")
    for index, indicator in enumerate(pool, start=1):
        print(f"{index:4d}. {indicator.name}")
        print(f"      trigger: {indicator.trigger_condition}")

    if query:
        print(f"\n🔎 Nearest indicators for: {query}")
        for hit in nearest_neighbors(pool, registry, query, k):
            print(f"{hit.rank:4d}. {hit.score:+.4f}  {hit.indicator.name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--log-level', default=None, help='Logging level (default: LOG_LEVEL env or INFO)')
    common.add_argument('--seed', type=int, default=None, help='Override embedding and retrieval seed')
    common.add_argument('--jobs', type=int, default=None, help='Tasks run in parallel')

    parser = argparse.ArgumentParser(description="Rectify-or-reject multi-agent runtime")
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help='Run a dataset through the gated team')
    run.add_argument('--config', required=True)
    run.add_argument('--dataset', required=True)
    run.add_argument('--pool', default=None, help='Indicator pool file (overrides gate.pool)')
    run.add_argument('--out', required=True, help='Output directory')

    mine = sub.add_parser('mine', parents=[common], help='Build an indicator pool from failures')
    mine.add_argument('--config', required=True)
    mine.add_argument('--dataset', required=True)
    mine.add_argument('--pool-out', required=True)
    mine.add_argument('--build-log', default=None)

    stats = sub.add_parser('stats', parents=[common], help='Summarize trajectory files')
    stats.add_argument('trajectory_dir')
    stats.add_argument('--overlap', action='append', default=[], metavar='LABEL=DIR')
    stats.add_argument('--out', default=None)
    stats.add_argument('--top-n', type=int, default=10)
    stats.add_argument('--t-max', type=int, default=None)

    pool = sub.add_parser('pool', help='Indicator pool tools')
    pool_sub = pool.add_subparsers(dest='pool_command', required=True)
    inspect = pool_sub.add_parser('inspect', parents=[common], help='Print entries and nearest neighbours')
    inspect.add_argument('--config', required=True)
    inspect.add_argument('--pool', required=True)
    inspect.add_argument('--query', default=None)
    inspect.add_argument('--k', type=int, default=5)
    return parser


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    if args.command == 'run':
        return cmd_run(args.config, args.dataset, args.pool, args.out, args.seed, args.jobs)
    if args.command == 'mine':
        return cmd_mine(args.config, args.dataset, args.pool_out, args.build_log, args.seed, args.jobs)
    if args.command == 'stats':
        return cmd_stats(args.trajectory_dir, args.overlap, args.out, args.top_n, args.t_max)
    return cmd_pool_inspect(args.config, args.pool, args.query, args.k, args.seed)


if __name__ == "__main__":
    sys.exit(main())
