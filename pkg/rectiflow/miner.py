"""
Offline failure-driven indicator pool construction.
Runs the team without rectification, keeps the failed trajectories, asks a
teacher model to distil failure patterns per agent output and admits them
through the dedup gate.
"""
import dataclasses
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from rectiflow.backends import BackendRegistry, ChatMessage
from rectiflow.domain import (
    AgentSpec,
    Indicator,
    RunConfig,
    SamplingParams,
    TaskSpec,
    Trajectory,
    canonical_json,
    normalize_answer,
)
from rectiflow.indicator_pool import IndicatorPool, insert_with_dedup
from rectiflow.prompts import PromptLibrary, get_prompt_library
from rectiflow.rectifier import REASK_MESSAGE, parse_json_payload
from rectiflow.runtime import RoutingPolicy, TaskRunner

logger = logging.getLogger(__name__)

NO_ERROR = 'NO_ERROR'
MAX_CANDIDATES_PER_CALL = 5
_NAME_CHARS = re.compile(r'[^A-Z0-9]+')
_LONE_BACKSLASH = re.compile(r'\\(?!["\\/bfnrtu])')
# \frac, \times, \neq ... parse as valid JSON escapes when single-escaped
_LATEX_COMMAND = re.compile(r'(?<!\\)\\(?=[A-Za-z]{2,})')
_CONTROL_CHARS = re.compile(r'[\b\f\t\n\r]')


@dataclass(frozen=True)
class MinedCandidate:
    indicator: Indicator
    source_task_id: str
    source_role: str

    def __post_init__(self):
        if not self.source_task_id or not self.source_role:
            raise ValueError("mined candidates need task and role provenance")


@dataclass
class PoolStats:
    tasks: int = 0
    failures: int = 0
    candidates: int = 0
    inserted: int = 0
    duplicates_dropped: int = 0
    parse_failures: int = 0
    skipped_tasks: int = 0

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class MiningResult:
    candidates: List[MinedCandidate]
    parse_failures: int = 0


def is_failure(trajectory: Trajectory) -> bool:
    if not trajectory.final_answer:
        return True
    return normalize_answer(trajectory.final_answer) != normalize_answer(trajectory.task.gold_answer)


def collect_failures(runner: TaskRunner, dataset: Sequence[TaskSpec], roster: Sequence[AgentSpec],
                     policy: RoutingPolicy, config: RunConfig, jobs: int = 1) -> Tuple[List[Trajectory], int]:
    """
    Plain roll-outs (scrutiny off) of every task; returns the failed
    trajectories in dataset order plus the number of tasks skipped on errors.
    """
    missing_gold = [task.id for task in dataset if not task.gold_answer]
    if missing_gold:
        raise ValueError(f"tasks without gold_answer: {', '.join(missing_gold)}")

    plain = dataclasses.replace(config, scrutiny_enabled=False)

    def roll_out(task: TaskSpec) -> Optional[Trajectory]:
        try:
            return runner.run_task(task, roster, policy, None, plain)
        except Exception as e:
            logger.error(f"Task {task.id}: roll-out failed, skipping: {e}")
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(roll_out, dataset))
    else:
        results = [roll_out(task) for task in dataset]

    skipped = sum(1 for r in results if r is None)
    failures = [r for r in results if r is not None and is_failure(r)]
    logger.info(f"Collected {len(failures)} failures from {len(dataset)} tasks ({skipped} skipped)")
    return failures, skipped


def normalize_indicator_name(name: str) -> str:
    normalized = _NAME_CHARS.sub('_', name.upper()).strip('_')
    if normalized != name:
        logger.info(f"Normalized indicator name {name!r} -> {normalized!r}")
    return normalized


def _unescape_latex(text: str) -> str:
    # The teacher double-escapes backslashes; undo that exactly once
    return text.replace('\\\\', '\\')


def _parse_teacher_reply(reply: str):
    """NO_ERROR sentinel -> [], JSON list (or single object) -> list, else None."""
    if reply is None:
        return None
    stripped = reply.strip().strip('`').strip()
    if stripped == NO_ERROR:
        return []
    value = _parse_candidates(reply)
    if value is None:
        value = _parse_candidates(_LONE_BACKSLASH.sub(r'\\\\', reply))
    if value is not None and _has_control_chars(value):
        reparsed = _parse_candidates(_LATEX_COMMAND.sub(r'\\\\', reply))
        if reparsed is not None:
            logger.info("Teacher reply had single-escaped LaTeX commands; re-parsed with doubled backslashes")
            value = reparsed
    return value


def _parse_candidates(text: str):
    value = parse_json_payload(text, list)
    if value is None:
        single = parse_json_payload(text, dict)
        value = [single] if single is not None else None
    return value


def _has_control_chars(value) -> bool:
    if isinstance(value, str):
        return bool(_CONTROL_CHARS.search(value))
    if isinstance(value, dict):
        return any(_has_control_chars(v) for v in value.values())
    if isinstance(value, list):
        return any(_has_control_chars(v) for v in value)
    return False


def _candidate_from(obj, task_id: str, role: str) -> Optional[MinedCandidate]:
    if not isinstance(obj, dict):
        return None
    evaluator = obj.get('evaluator_prompt') or {}
    trigger = evaluator.get('trigger_condition') if isinstance(evaluator, dict) else None
    trigger = trigger or obj.get('trigger_condition')
    name = obj.get('name')
    definition = obj.get('detailed_definition') or obj.get('definition')
    if not (name and definition and trigger):
        return None
    example = obj.get('example_error')
    try:
        indicator = Indicator(
            name=normalize_indicator_name(str(name)),
            definition=_unescape_latex(str(definition)),
            trigger_condition=_unescape_latex(str(trigger)),
            domain_tag=str(obj['domain_tag']) if obj.get('domain_tag') else None,
            example_error=_unescape_latex(str(example)) if example else None,
        )
    except ValueError:
        return None
    return MinedCandidate(indicator, task_id, role)


def _mine(registry: BackendRegistry, teacher_backend_id: str, failure: Trajectory, agent_index: int,
          params: SamplingParams = None, prompts: PromptLibrary = None) -> MiningResult:
    prompts = prompts or get_prompt_library()
    params = params or SamplingParams()
    if not failure.task.gold_answer:
        raise ValueError(f"task {failure.task.id} has no gold answer")
    if not 0 <= agent_index < len(failure.steps):
        raise IndexError(f"agent_index {agent_index} out of range for task {failure.task.id}")

    step = failure.steps[agent_index]
    output = step.outcome.accepted_text or step.outcome.history[-1].candidate
    prompt = prompts.render(
        'teacher_math',
        problem=failure.task.question,
        solution=failure.task.gold_answer,
        agent_role=step.role,
        output=output,
        max_candidates=MAX_CANDIDATES_PER_CALL,
    )
    messages = [ChatMessage('user', prompt)]
    reply = registry.generate(teacher_backend_id, messages, params)
    objects = _parse_teacher_reply(reply)
    if objects is None:
        messages = messages + [ChatMessage('assistant', reply or ''), ChatMessage('user', REASK_MESSAGE)]
        reply = registry.generate(teacher_backend_id, messages, params)
        objects = _parse_teacher_reply(reply)
    if objects is None:
        logger.warning(f"Teacher reply for task {failure.task.id} / {step.role} unparseable after re-ask")
        return MiningResult([], parse_failures=1)

    if len(objects) > MAX_CANDIDATES_PER_CALL:
        logger.warning(f"Teacher returned {len(objects)} indicators for task {failure.task.id} / {step.role}; "
                       f"keeping the first {MAX_CANDIDATES_PER_CALL}")
        objects = objects[:MAX_CANDIDATES_PER_CALL]

    candidates, invalid = [], 0
    for obj in objects:
        candidate = _candidate_from(obj, failure.task.id, step.role)
        if candidate is None:
            invalid += 1
            logger.warning(f"Dropping malformed indicator object from task {failure.task.id}: {str(obj)[:120]}")
        else:
            candidates.append(candidate)
    return MiningResult(candidates, parse_failures=invalid)


def mine_indicators(registry: BackendRegistry, teacher_backend_id: str, failure: Trajectory,
                    agent_index: int, params: SamplingParams = None,
                    prompts: PromptLibrary = None) -> List[MinedCandidate]:
    return _mine(registry, teacher_backend_id, failure, agent_index, params, prompts).candidates


class PoolBuilder:
    """Single writer for the pool file and the build log."""

    def __init__(self, runner: TaskRunner, config: RunConfig, prompts: PromptLibrary = None):
        self.runner = runner
        self.registry = runner.registry
        self.config = config
        self.prompts = prompts or runner.prompts

    def _log(self, handle, task_id: str, role: str, name: Optional[str], decision: str):
        handle.write(canonical_json({'task_id': task_id, 'role': role, 'name': name, 'decision': decision}) + '\n')
        handle.flush()

    def build_pool(self, dataset: Sequence[TaskSpec], roster: Sequence[AgentSpec], policy: RoutingPolicy,
                   output_path: Union[str, Path], build_log_path: Union[str, Path] = None,
                   jobs: int = 1) -> PoolStats:
        config = self.config
        for backend_id, label in ((config.teacher_backend_id, 'teacher'), (config.dedup_backend_id, 'dedup')):
            if not self.registry.has(backend_id) and (label == 'teacher' or config.dedup_enabled):
                raise ValueError(f"{label} backend '{backend_id}' is not registered")

        output_path = Path(output_path)
        build_log_path = Path(build_log_path) if build_log_path else output_path.with_suffix('.buildlog.jsonl')
        output_path.parent.mkdir(parents=True, exist_ok=True)

        stats = PoolStats(tasks=len(dataset))
        failures, stats.skipped_tasks = collect_failures(self.runner, dataset, roster, policy, config, jobs)
        stats.failures = len(failures)

        deciders = {spec.role.name for spec in roster if spec.is_decision}
        pool = IndicatorPool(self.registry.dimension)
        teacher_params = SamplingParams(temperature=0.0, max_tokens=config.max_tokens)
        dedup_params = SamplingParams(temperature=0.0, max_tokens=config.max_tokens)

        output_path.write_text('', encoding='utf-8')
        with open(build_log_path, 'w', encoding='utf-8') as log_file:
            for failure in failures:
                for index, step in enumerate(failure.steps):
                    if step.role in deciders and not config.mine_decision_agent:
                        continue
                    try:
                        result = _mine(self.registry, config.teacher_backend_id, failure, index,
                                       teacher_params, self.prompts)
                    except Exception as e:
                        logger.error(f"Mining task {failure.task.id} / {step.role} failed: {e}")
                        stats.candidates += 1
                        stats.parse_failures += 1
                        self._log(log_file, failure.task.id, step.role, None, 'parse_failure')
                        continue

                    stats.candidates += len(result.candidates) + result.parse_failures
                    stats.parse_failures += result.parse_failures
                    for _ in range(result.parse_failures):
                        self._log(log_file, failure.task.id, step.role, None, 'parse_failure')

                    for mined in result.candidates:
                        inserted = insert_with_dedup(
                            pool, mined.indicator, self.registry, config.dedup_backend_id, config.k_dedup,
                            dedup_enabled=config.dedup_enabled, prompts=self.prompts, params=dedup_params,
                        )
                        name = mined.indicator.name
                        if inserted:
                            stats.inserted += 1
                            IndicatorPool.append_to(output_path, pool.entries[-1])
                            self._log(log_file, mined.source_task_id, mined.source_role, name, 'inserted')
                        else:
                            stats.duplicates_dropped += 1
                            self._log(log_file, mined.source_task_id, mined.source_role, name, 'duplicate')

        logger.info(f"Pool build finished: {json.dumps(stats.to_dict())}")
        return stats


def build_pool(runner: TaskRunner, dataset: Sequence[TaskSpec], roster: Sequence[AgentSpec],
               policy: RoutingPolicy, config: RunConfig, output_path: Union[str, Path],
               build_log_path: Union[str, Path] = None, jobs: int = 1) -> PoolStats:
    return PoolBuilder(runner, config).build_pool(dataset, roster, policy, output_path, build_log_path, jobs)
