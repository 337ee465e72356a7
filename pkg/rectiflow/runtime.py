"""
Multi-agent execution: routing, generation, gating, broadcast,
global fallback and final-answer extraction.
"""
import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from rectiflow.backends import BackendRegistry, ChatMessage
from rectiflow.domain import (
    AgentSpec,
    AgentState,
    ConfigurationError,
    FallbackEvent,
    KnowledgeEntry,
    RoleSpec,
    RunConfig,
    SamplingParams,
    TaskSpec,
    Trajectory,
    TrajectoryStep,
)
from rectiflow.gate import Gate, FallbackDecision, build_agent_messages, check_fallback
from rectiflow.indicator_pool import IndicatorPool
from rectiflow.prompts import PromptLibrary, get_prompt_library
from rectiflow.rectifier import Rectifier

logger = logging.getLogger(__name__)

TERMINATE = None


@dataclass(frozen=True)
class ScriptedRouting:
    sequence: Tuple[str, ...]

    def __post_init__(self):
        if not self.sequence:
            raise ValueError("scripted routing needs a non-empty sequence")


@dataclass(frozen=True)
class SelectorRouting:
    backend_id: str
    template: str = 'selector'
    temperature: float = 0.0


RoutingPolicy = Union[ScriptedRouting, SelectorRouting]


def _parse_role(reply: str, role_names: Sequence[str]) -> Optional[str]:
    text = (reply or '').strip().strip('`*"\' ')
    if text in role_names:
        return text
    # Longest name first so "MathSolverLead" is not read as "MathSolver"
    for name in sorted(role_names, key=len, reverse=True):
        if re.search(rf'(?<![\w]){re.escape(name)}(?![\w])', reply or ''):
            return name
    return None


def select_next(policy: RoutingPolicy, task: TaskSpec, history: Sequence[Tuple[str, str]], *,
                roster: Sequence[AgentSpec], turns_taken: int, max_chat_turns: int,
                decision_spoken: bool = False, registry: BackendRegistry = None,
                prompts: PromptLibrary = None) -> Optional[str]:
    """
    Next speaker's role name, or TERMINATE. `history` holds finalized
    (role, text) pairs only; rejected attempts are never shown.
    """
    if decision_spoken or turns_taken >= max_chat_turns or len(history) >= max_chat_turns:
        return TERMINATE

    role_names = [spec.role.name for spec in roster]

    if isinstance(policy, ScriptedRouting):
        if turns_taken >= len(policy.sequence):
            return TERMINATE
        return policy.sequence[turns_taken]

    prompts = prompts or get_prompt_library()
    prompt = prompts.render(
        policy.template,
        task=task.question,
        roles=[spec.role for spec in roster],
        role_names=role_names,
        history=list(history),
    )
    params = SamplingParams(temperature=policy.temperature)
    messages = [ChatMessage('user', prompt)]
    reply = registry.generate(policy.backend_id, messages, params)
    name = _parse_role(reply, role_names)
    if name is None:
        messages = messages + [
            ChatMessage('assistant', reply or ''),
            ChatMessage('user', f"Answer with exactly one of: {', '.join(role_names)}."),
        ]
        reply = registry.generate(policy.backend_id, messages, params)
        name = _parse_role(reply, role_names)
    if name is None:
        name = role_names[turns_taken % len(role_names)]
        logger.warning(f"Selector named no known role twice; round-robin picks {name}")
    return name


def agent_generate(registry: BackendRegistry, agent: AgentState, task: TaskSpec,
                   prompts: PromptLibrary = None) -> str:
    messages = build_agent_messages(agent, task, prompts)
    return registry.generate(agent.spec.backend_id, messages, agent.spec.sampling)


def broadcast(finalized: str, source: RoleSpec, agents: Sequence[AgentState]) -> Sequence[AgentState]:
    """Append the finalized message to every knowledge base but the speaker's own."""
    for agent in agents:
        if agent.name == source.name:
            agent.own_outputs.append(finalized)
        else:
            agent.knowledge.append(KnowledgeEntry(source.name, finalized))
    return agents


def validate_roster(roster: Sequence[AgentSpec], policy: RoutingPolicy,
                    registry: BackendRegistry = None) -> List[str]:
    issues = []
    if not roster:
        issues.append("roster: at least one agent is required")
    names = [spec.role.name for spec in roster]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        issues.append(f"roster: duplicate role names {duplicates}")
    deciders = [spec.role.name for spec in roster if spec.is_decision]
    if roster and len(deciders) != 1:
        issues.append(f"roster: exactly one decision agent required, found {len(deciders)}")
    if isinstance(policy, ScriptedRouting):
        unknown = sorted(set(policy.sequence) - set(names))
        if unknown:
            issues.append(f"routing.sequence: unknown roles {unknown}")
    if registry is not None:
        for spec in roster:
            if not registry.has(spec.backend_id):
                issues.append(f"agent.{spec.role.name}.backend: unknown backend '{spec.backend_id}'")
        if isinstance(policy, SelectorRouting) and not registry.has(policy.backend_id):
            issues.append(f"routing.backend: unknown backend '{policy.backend_id}'")
    return issues


class TaskRunner:
    """Executes tasks over a shared registry; one run_task call is single-threaded."""

    def __init__(self, registry: BackendRegistry, prompts: PromptLibrary = None):
        self.registry = registry
        self.prompts = prompts or get_prompt_library()

    def _gate(self, config: RunConfig) -> Gate:
        return Gate(self.registry, Rectifier(self.registry, config, self.prompts), self.prompts)

    def _check_setup(self, roster, policy, pool, config):
        issues = validate_roster(roster, policy, self.registry)
        if config.scrutiny_enabled:
            if not self.registry.has(config.rectifier_backend_id):
                issues.append(f"gate.rectifier_backend: unknown backend '{config.rectifier_backend_id}'")
            if not config.zero_shot and (pool is None or len(pool) == 0):
                issues.append("gate.pool: an indicator pool is required unless zero_shot is set")
        if issues:
            raise ConfigurationError(issues)

    def _run_segment(self, task, states, policy, pool, config, gate) -> Tuple[List[TrajectoryStep], Optional[str], bool]:
        """One pass of the conversation. Returns (steps, decider's finalized text, decider spoke)."""
        by_name = {s.name: s for s in states}
        steps: List[TrajectoryStep] = []
        history: List[Tuple[str, str]] = []
        decision_text = None
        decision_spoken = False

        while True:
            name = select_next(policy, task, history, roster=[s.spec for s in states],
                               turns_taken=len(steps), max_chat_turns=config.max_chat_turns,
                               decision_spoken=decision_spoken, registry=self.registry,
                               prompts=self.prompts)
            if name is TERMINATE:
                break
            agent = by_name[name]
            candidate = agent_generate(self.registry, agent, task, self.prompts)
            outcome = gate.rectify_or_reject(agent, candidate, task, pool, config)
            steps.append(TrajectoryStep(name, outcome))

            if outcome.passed:
                text = outcome.accepted_text
                broadcast(text, agent.spec.role, states)
                history.append((name, text))
                if agent.spec.is_decision:
                    decision_text = text
            else:
                logger.info(f"Task {task.id}: output of {name} rejected and pruned")

            if agent.spec.is_decision:
                decision_spoken = True

        return steps, decision_text, decision_spoken

    def run_task(self, task: TaskSpec, roster: Sequence[AgentSpec], policy: RoutingPolicy,
                 pool: Optional[IndicatorPool], config: RunConfig) -> Trajectory:
        self._check_setup(roster, policy, pool, config)
        gate = self._gate(config)
        states = [AgentState(spec) for spec in roster]
        deciders = {spec.role.name for spec in roster if spec.is_decision}
        trajectory = Trajectory(task=task)
        resets_used = 0
        logger.info(f"Task {task.id}: starting run with {len(roster)} agents")

        while True:
            steps, decision_text, decision_spoken = self._run_segment(task, states, policy, pool, config, gate)
            # Only non-decision messages count toward the critical mass
            valid = sum(1 for s in steps if s.outcome.passed and s.role not in deciders)
            decision = check_fallback(valid, config.gamma, resets_used, config.reset_budget)

            if decision is FallbackDecision.RESET:
                step_index = len(trajectory.all_steps()) + len(steps)
                reason = f"{valid} valid messages below threshold {config.gamma}"
                logger.warning(f"Task {task.id}: global fallback reset ({reason})")
                trajectory.fallback_events.append(FallbackEvent(step_index, reason))
                trajectory.discarded_segments.append(steps)
                for state in states:
                    state.reset()
                resets_used += 1
                continue

            if decision is FallbackDecision.BUDGET_EXHAUSTED:
                logger.warning(f"Task {task.id}: reset budget exhausted with {valid} valid messages; "
                               f"keeping surviving context")
                trajectory.fallback_exhausted = True

            trajectory.steps = steps
            trajectory.final_answer = decision_text
            break

        logger.info(f"Task {task.id}: finished, final answer {'present' if trajectory.final_answer else 'absent'}")
        return trajectory
