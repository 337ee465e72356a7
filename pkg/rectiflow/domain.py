#!/usr/bin/env python3
"""
Domain models shared by every part of the rectify-or-reject runtime.
Kept free of I/O to avoid circular imports.
"""

import json
import math
import re
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Any

import numpy as np

from config import Config


class DimensionMismatchError(ValueError):
    """Raised when two vectors (or a vector and a pool) disagree on dimension."""
    pass


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""
    pass


class ConfigurationError(ValueError):
    """Invalid experiment setup, reported with every offending field."""

    def __init__(self, issues):
        self.issues = [issues] if isinstance(issues, str) else list(issues)
        super().__init__('; '.join(self.issues))


def canonical_json(payload: Any) -> str:
    """Serialize with sorted keys and raw UTF-8 so equal values give equal bytes."""
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


@dataclass(frozen=True)
class TaskSpec:
    """One question to run through the agent team."""
    id: str
    question: str
    gold_answer: Optional[str] = None
    domain_tag: str = 'math'

    def __post_init__(self):
        if not self.id:
            raise ValueError("TaskSpec.id must be non-empty")
        if not self.question:
            raise ValueError(f"TaskSpec {self.id}: question must be non-empty")

    @classmethod
    def from_dict(cls, data: Dict) -> 'TaskSpec':
        return cls(
            id=str(data['id']),
            question=data['question'],
            gold_answer=None if data.get('gold_answer') is None else str(data['gold_answer']),
            domain_tag=data.get('domain_tag') or 'math',
        )


@dataclass(frozen=True)
class RoleSpec:
    """Persona, responsibilities and constraints of one agent."""
    name: str
    instructions: str


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = Config.AGENT_TEMPERATURE
    max_tokens: int = Config.MAX_TOKENS

    def __post_init__(self):
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class KnowledgeEntry:
    """A finalized message observed by an agent."""
    source_role: str
    content: str


@dataclass(frozen=True)
class AgentSpec:
    role: RoleSpec
    backend_id: str
    sampling: SamplingParams = field(default_factory=SamplingParams)
    is_decision: bool = False


@dataclass
class AgentState:
    """Run-local state of one agent. Confined to a single task run."""
    spec: AgentSpec
    knowledge: List[KnowledgeEntry] = field(default_factory=list)
    own_outputs: List[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.role.name

    def reset(self):
        self.knowledge.clear()
        self.own_outputs.clear()


@dataclass(frozen=True)
class Indicator:
    """A named failure pattern: (name, definition, trigger condition)."""
    name: str
    definition: str
    trigger_condition: str
    domain_tag: Optional[str] = None
    example_error: Optional[str] = None
    embedding_condition: Optional[Tuple[float, ...]] = None
    embedding_dedup: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        for attr in ('name', 'definition', 'trigger_condition'):
            if not getattr(self, attr):
                raise ValueError(f"Indicator field '{attr}' must be non-empty")

    @property
    def dedup_text(self) -> str:
        # d ⊕ c
        return f"{self.definition}\n{self.trigger_condition}"

    def to_dict(self) -> Dict:
        data = {
            'name': self.name,
            'definition': self.definition,
            'trigger_condition': self.trigger_condition,
        }
        if self.domain_tag is not None:
            data['domain_tag'] = self.domain_tag
        if self.example_error is not None:
            data['example_error'] = self.example_error
        if self.embedding_condition is not None:
            data['embedding_condition'] = list(self.embedding_condition)
        if self.embedding_dedup is not None:
            data['embedding_dedup'] = list(self.embedding_dedup)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'Indicator':
        cond = data.get('embedding_condition')
        dedup = data.get('embedding_dedup')
        return cls(
            name=data['name'],
            definition=data['definition'],
            trigger_condition=data['trigger_condition'],
            domain_tag=data.get('domain_tag'),
            example_error=data.get('example_error'),
            embedding_condition=tuple(float(x) for x in cond) if cond is not None else None,
            embedding_dedup=tuple(float(x) for x in dedup) if dedup is not None else None,
        )


@dataclass(frozen=True)
class Verdict:
    """Rectifier judgment of one candidate against one indicator."""
    indicator_name: str
    violated: bool
    rationale: str = ''
    raw_fields: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class FeedbackItem:
    indicator_name: str
    rationale: str
    suggestion: str
    note: str = ''


@dataclass(frozen=True)
class AggregateVerdict:
    error_state: bool
    feedback: Tuple[FeedbackItem, ...] = ()

    def __post_init__(self):
        if self.error_state != bool(self.feedback):
            raise ContractViolation("error_state must be true iff feedback is non-empty")


class GateStatus(str, Enum):
    PASSED = 'passed'
    REJECTED = 'rejected'


@dataclass(frozen=True)
class GateRound:
    """One scrutiny round of the gate loop."""
    candidate: str
    active_indicators: Tuple[str, ...]
    aggregate: AggregateVerdict


@dataclass(frozen=True)
class GateOutcome:
    status: GateStatus
    history: Tuple[GateRound, ...]
    accepted_iteration: Optional[int] = None

    def __post_init__(self):
        if not self.history:
            raise ContractViolation("GateOutcome needs at least one round")
        if self.status is GateStatus.PASSED:
            if self.accepted_iteration is None or self.accepted_iteration != len(self.history) - 1:
                raise ContractViolation("Passed outcome must accept its last round")
            if self.history[-1].aggregate.error_state:
                raise ContractViolation("Passed outcome's last round must be clean")
        else:
            if self.accepted_iteration is not None:
                raise ContractViolation("Rejected outcome carries no accepted iteration")
            if not all(r.aggregate.error_state for r in self.history):
                raise ContractViolation("Rejected outcome must be flagged at every round")

    @property
    def passed(self) -> bool:
        return self.status is GateStatus.PASSED

    @property
    def accepted_text(self) -> Optional[str]:
        """The broadcastable message; None for Rejected."""
        if not self.passed:
            return None
        return self.history[-1].candidate

    @classmethod
    def passed_at(cls, history: Sequence[GateRound]) -> 'GateOutcome':
        return cls(GateStatus.PASSED, tuple(history), accepted_iteration=len(history) - 1)

    @classmethod
    def rejected(cls, history: Sequence[GateRound]) -> 'GateOutcome':
        return cls(GateStatus.REJECTED, tuple(history))

    def to_dict(self) -> Dict:
        return {
            'status': self.status.value,
            'accepted_iteration': self.accepted_iteration,
            'history': [
                {
                    'candidate': r.candidate,
                    'active_indicators': list(r.active_indicators),
                    'error_state': r.aggregate.error_state,
                    'feedback': [asdict(item) for item in r.aggregate.feedback],
                }
                for r in self.history
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'GateOutcome':
        history = tuple(
            GateRound(
                candidate=r['candidate'],
                active_indicators=tuple(r['active_indicators']),
                aggregate=AggregateVerdict(
                    error_state=r['error_state'],
                    feedback=tuple(FeedbackItem(**item) for item in r['feedback']),
                ),
            )
            for r in data['history']
        )
        return cls(GateStatus(data['status']), history, data.get('accepted_iteration'))


@dataclass(frozen=True)
class TrajectoryStep:
    role: str
    outcome: GateOutcome


@dataclass(frozen=True)
class FallbackEvent:
    step_index: int
    reason: str


@dataclass
class Trajectory:
    """Complete record of one task run."""
    task: TaskSpec
    steps: List[TrajectoryStep] = field(default_factory=list)
    fallback_events: List[FallbackEvent] = field(default_factory=list)
    final_answer: Optional[str] = None
    discarded_segments: List[List[TrajectoryStep]] = field(default_factory=list)
    fallback_exhausted: bool = False

    def all_steps(self) -> List[TrajectoryStep]:
        """Steps of discarded segments followed by the surviving segment."""
        steps = [s for segment in self.discarded_segments for s in segment]
        return steps + list(self.steps)

    def to_dict(self) -> Dict:
        def step_dict(step: TrajectoryStep) -> Dict:
            return {'role': step.role, 'outcome': step.outcome.to_dict()}

        return {
            'task': asdict(self.task),
            'steps': [step_dict(s) for s in self.steps],
            'fallback_events': [asdict(e) for e in self.fallback_events],
            'final_answer': self.final_answer,
            'discarded_segments': [[step_dict(s) for s in seg] for seg in self.discarded_segments],
            'fallback_exhausted': self.fallback_exhausted,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Trajectory':
        def step_from(d: Dict) -> TrajectoryStep:
            return TrajectoryStep(d['role'], GateOutcome.from_dict(d['outcome']))

        return cls(
            task=TaskSpec.from_dict(data['task']),
            steps=[step_from(s) for s in data.get('steps', [])],
            fallback_events=[FallbackEvent(**e) for e in data.get('fallback_events', [])],
            final_answer=data.get('final_answer'),
            discarded_segments=[[step_from(s) for s in seg] for seg in data.get('discarded_segments', [])],
            fallback_exhausted=bool(data.get('fallback_exhausted', False)),
        )


DOMAIN_TAGS = ('math', 'code')


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one run. Defaults come from Config."""
    t_max: int = Config.T_MAX
    k_act: int = Config.K_ACT
    k_dedup: int = Config.K_DEDUP
    gamma: int = Config.GAMMA
    max_chat_turns: int = Config.MAX_CHAT_TURNS
    zero_shot: bool = False
    reset_budget: int = Config.RESET_BUDGET
    embedding_dim: int = Config.EMBEDDING_DIM

    scrutiny_enabled: bool = True
    retrieval_mode: str = 'semantic'  # semantic | random
    dedup_enabled: bool = True
    domain_tag: str = 'math'
    fail_closed: bool = False
    max_parallel_checks: int = 5
    rectifier_temperature: float = Config.RECTIFIER_TEMPERATURE
    agent_temperature: float = Config.AGENT_TEMPERATURE
    max_tokens: int = Config.MAX_TOKENS
    rectifier_backend_id: str = 'rectifier'
    teacher_backend_id: str = 'teacher'
    dedup_backend_id: str = 'dedup'
    mine_decision_agent: bool = False
    seed: int = Config.EMBEDDING_SEED

    def __post_init__(self):
        issues = self.validation_issues()
        if issues:
            raise ValueError("; ".join(issues))

    def validation_issues(self) -> List[str]:
        issues = []
        for name in ('t_max', 'gamma', 'reset_budget'):
            if getattr(self, name) < 0:
                issues.append(f"{name} must be >= 0")
        for name in ('k_act', 'k_dedup', 'max_chat_turns', 'embedding_dim', 'max_parallel_checks', 'max_tokens'):
            if getattr(self, name) <= 0:
                issues.append(f"{name} must be positive")
        if self.retrieval_mode not in ('semantic', 'random'):
            issues.append(f"retrieval_mode must be 'semantic' or 'random', got '{self.retrieval_mode}'")
        if self.domain_tag not in DOMAIN_TAGS:
            issues.append(f"domain_tag must be one of {', '.join(DOMAIN_TAGS)}, got '{self.domain_tag}'")
        if self.rectifier_temperature < 0 or self.agent_temperature < 0:
            issues.append("temperatures must be >= 0")
        return issues

    @property
    def rectifier_sampling(self) -> SamplingParams:
        return SamplingParams(self.rectifier_temperature, self.max_tokens)


# ---------------------------------------------------------------------------
# Pure helpers
# ---------------------------------------------------------------------------

def jaccard(a: set, b: set) -> float:
    """|a ∩ b| / |a ∪ b|; two empty sets are identical profiles (1.0)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"dimension mismatch: {u.shape} vs {v.shape}")
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    score = float(np.dot(u, v) / (norm_u * norm_v))
    return max(-1.0, min(1.0, score))


_BOXED = '\\boxed{'
_WHITESPACE = re.compile(r'\s+')


def _extract_boxed(text: str) -> Optional[str]:
    """Content of the last outermost \\boxed{...}, scanning balanced braces."""
    start = text.rfind(_BOXED)
    if start < 0:
        start = text.rfind('boxed{')
        if start < 0:
            return None
        open_at = start + len('boxed{')
    else:
        open_at = start + len(_BOXED)
    depth = 1
    for pos in range(open_at, len(text)):
        ch = text[pos]
        if ch == '{':
            depth += 1
        elif ch == '}':
            depth -= 1
            if depth == 0:
                return text[open_at:pos]
    return None


def normalize_answer(raw: Optional[str]) -> str:
    if not raw:
        return ''
    boxed = _extract_boxed(raw)
    text = boxed if boxed is not None else raw
    text = _WHITESPACE.sub(' ', text.strip())
    return text.rstrip('.').rstrip()
