"""
Tri-state Pass/Retry/Reject gate around one intercepted agent output,
plus the global fallback check.
"""
import logging
from enum import Enum
from typing import List, Optional

from rectiflow.backends import BackendRegistry, ChatMessage
from rectiflow.domain import (
    AgentState,
    AggregateVerdict,
    GateOutcome,
    GateRound,
    RunConfig,
    TaskSpec,
)
from rectiflow.indicator_pool import IndicatorPool
from rectiflow.prompts import PromptLibrary, get_prompt_library
from rectiflow.rectifier import Rectifier, render_feedback

logger = logging.getLogger(__name__)


class GateError(RuntimeError):
    """Backend failure inside the gate loop, tagged with the iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class FallbackDecision(str, Enum):
    PROCEED = 'proceed'
    RESET = 'reset'
    BUDGET_EXHAUSTED = 'budget_exhausted'


def check_fallback(valid_message_count: int, gamma: int, resets_used: int, reset_budget: int) -> FallbackDecision:
    if valid_message_count >= gamma:
        return FallbackDecision.PROCEED
    if resets_used < reset_budget:
        return FallbackDecision.RESET
    return FallbackDecision.BUDGET_EXHAUSTED


def build_agent_messages(agent: AgentState, task: TaskSpec, prompts: PromptLibrary = None) -> List[ChatMessage]:
    """System = role instructions; user = question, then knowledge in arrival order."""
    prompts = prompts or get_prompt_library()
    user = prompts.render(
        'agent_user',
        question=task.question,
        knowledge=agent.knowledge,
        own_outputs=agent.own_outputs,
        role=agent.name,
    )
    return [ChatMessage('system', agent.spec.role.instructions), ChatMessage('user', user)]


class Gate:
    """Runs the rectification loop for one agent output at a time."""

    def __init__(self, registry: BackendRegistry, rectifier: Rectifier, prompts: PromptLibrary = None):
        self.registry = registry
        self.rectifier = rectifier
        self.prompts = prompts or rectifier.prompts

    def _regenerate(self, agent: AgentState, task: TaskSpec, previous: str, feedback: str) -> str:
        # Only the latest round's feedback is injected; earlier feedback survives
        # through the agent's own previous attempt.
        messages = build_agent_messages(agent, task, self.prompts) + [
            ChatMessage('assistant', previous),
            ChatMessage('user', feedback),
        ]
        return self.registry.generate(agent.spec.backend_id, messages, agent.spec.sampling)

    def rectify_or_reject(self, agent: AgentState, initial_candidate: str, task: TaskSpec,
                          pool: Optional[IndicatorPool], config: RunConfig) -> GateOutcome:
        if config.t_max < 0:
            raise ValueError("t_max must be >= 0")

        if not config.scrutiny_enabled:
            clean = GateRound(initial_candidate, (), AggregateVerdict(False))
            return GateOutcome.passed_at([clean])

        if not config.zero_shot and (pool is None or len(pool) == 0):
            raise ValueError("rectify_or_reject needs a non-empty pool unless zero_shot is set")

        history: List[GateRound] = []
        candidate = initial_candidate
        for t in range(config.t_max + 1):
            logger.info(f"Gate {agent.name} iteration {t}: scrutinizing candidate")
            try:
                scrutiny = self.rectifier.scrutinize(candidate, task, agent.spec.role, pool)
            except Exception as e:
                logger.error(f"Gate {agent.name} iteration {t}: scrutiny failed: {e}")
                raise GateError(f"scrutiny of {agent.name} failed at iteration {t}: {e}", t) from e

            history.append(GateRound(
                candidate=candidate,
                active_indicators=tuple(ind.name for ind in scrutiny.active),
                aggregate=scrutiny.aggregate,
            ))

            if not scrutiny.aggregate.error_state:
                logger.info(f"Gate {agent.name}: PASS at iteration {t}")
                return GateOutcome.passed_at(history)

            if t == config.t_max:
                break

            feedback = render_feedback(scrutiny.aggregate, attempt=t + 1, prompts=self.prompts)
            logger.info(f"Gate {agent.name}: RETRY after iteration {t} "
                        f"({len(scrutiny.aggregate.feedback)} violated indicators)")
            try:
                candidate = self._regenerate(agent, task, candidate, feedback)
            except Exception as e:
                logger.error(f"Gate {agent.name} iteration {t}: regeneration failed: {e}")
                raise GateError(f"regeneration of {agent.name} failed at iteration {t}: {e}", t) from e

        logger.info(f"Gate {agent.name}: REJECT after {len(history)} rounds")
        return GateOutcome.rejected(history)
