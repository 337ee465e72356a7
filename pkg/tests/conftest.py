"""
Shared fixtures: scripted registries, rosters and trajectory builders.
"""
import json
from pathlib import Path

import pytest

from rectiflow.backends import BackendRegistry, ScriptedBackend, ScriptedEmbedder, ScriptRule
from rectiflow.domain import (
    AgentSpec,
    AggregateVerdict,
    FeedbackItem,
    GateOutcome,
    GateRound,
    Indicator,
    RoleSpec,
    SamplingParams,
    TaskSpec,
    Trajectory,
    TrajectoryStep,
)
from rectiflow.prompts import PromptLibrary

GOLDEN_DIR = Path(__file__).parent / 'fixtures' / 'golden'

CLEAN_VERDICT = json.dumps({
    'evidence_quote': 'N/A', 'analysis': 'N/A', 'suggestion': 'N/A',
    'impact_assessment': 'NO', 'is_flawed': False,
})


def flawed_verdict(analysis: str = 'The step is wrong.', suggestion: str = 'Fix the step.') -> str:
    return json.dumps({
        'evidence_quote': 'quoted step', 'analysis': analysis, 'suggestion': suggestion,
        'impact_assessment': 'YES', 'is_flawed': True,
    })


@pytest.fixture
def golden_dir():
    return GOLDEN_DIR


@pytest.fixture
def prompts():
    return PromptLibrary()


@pytest.fixture
def make_registry():
    """Build a registry over scripted backends with a seeded 8-d embedder."""
    def factory(generators, dimension=8, seed=0):
        return BackendRegistry(dict(generators), ScriptedEmbedder(dimension, seed))
    return factory


@pytest.fixture
def scripted():
    """ScriptedBackend from (contains, response) pairs plus an optional responder."""
    def factory(backend_id, rules=(), responder=None):
        parsed = [ScriptRule(tuple(contains) if not isinstance(contains, str) else (contains,), response)
                  for contains, response in rules]
        return ScriptedBackend(backend_id, rules=parsed, responder=responder, record_calls=True)
    return factory


@pytest.fixture
def agent_spec():
    def factory(name, backend_id=None, is_decision=False, instructions=None):
        return AgentSpec(
            role=RoleSpec(name, instructions or f"You are the {name}."),
            backend_id=backend_id or name.lower(),
            sampling=SamplingParams(temperature=0.7),
            is_decision=is_decision,
        )
    return factory


@pytest.fixture
def task():
    return TaskSpec('t1', 'What is 2 + 2?', gold_answer='4')


def clean_round(candidate='ok', active=('A',)):
    return GateRound(candidate, tuple(active), AggregateVerdict(False))


def flagged_round(candidate='bad', active=('A',), names=('A',)):
    feedback = tuple(FeedbackItem(name, 'rationale', 'suggestion', 'note') for name in names)
    return GateRound(candidate, tuple(active), AggregateVerdict(True, feedback))


def passed_outcome(iteration=0, active=('A',)):
    history = [flagged_round(active=active, names=active[:1]) for _ in range(iteration)]
    return GateOutcome.passed_at(history + [clean_round(active=active)])


def rejected_outcome(rounds=1, active=('A',)):
    return GateOutcome.rejected([flagged_round(active=active, names=active[:1]) for _ in range(rounds)])


def make_trajectory(task_id='t1', outcomes=(), final_answer=None, gold_answer='4'):
    steps = [TrajectoryStep(f'role{i}', outcome) for i, outcome in enumerate(outcomes)]
    return Trajectory(TaskSpec(task_id, f'question {task_id}', gold_answer), steps=steps,
                      final_answer=final_answer)


def make_indicator(name, trigger=None, **kwargs):
    return Indicator(name=name, definition=f'definition of {name}',
                     trigger_condition=trigger or f'trigger of {name}', **kwargs)


def dedup_oracle(messages, params):
    """DUPLICATE exactly when the candidate block already appears among the neighbours."""
    prompt = messages[-1].content
    candidate_part, existing_part = prompt.split('### Existing indicators', 1)
    candidate = candidate_part.split('### Candidate', 1)[1].strip()
    return 'DUPLICATE' if candidate in existing_part else 'NOVEL'
