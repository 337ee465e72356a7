"""
Per-output scrutiny: keyword extraction, query building, per-indicator
evaluation against the rectifier model, zero-tolerance aggregation and
feedback rendering.
"""
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from rectiflow.backends import BackendRegistry, ChatMessage
from rectiflow.domain import (
    DOMAIN_TAGS,
    AggregateVerdict,
    ContractViolation,
    FeedbackItem,
    Indicator,
    RoleSpec,
    RunConfig,
    SamplingParams,
    TaskSpec,
    Verdict,
)
from rectiflow.indicator_pool import (
    IndicatorPool,
    general_indicator,
    retrieve_random_k,
    retrieve_top_k,
)
from rectiflow.prompts import PromptLibrary, get_prompt_library

logger = logging.getLogger(__name__)

EMPTY_QUERY_TEXT = 'general reasoning step'
VERDICT_FIELDS = ('evidence_quote', 'analysis', 'suggestion', 'impact_assessment')
REASK_MESSAGE = 'Your previous reply was not valid JSON. Respond again with the JSON object only, no other text.'
_FENCE = re.compile(r'^```(?:json)?\s*|\s*```$', re.IGNORECASE)


@dataclass(frozen=True)
class KeywordSets:
    scenario: Tuple[str, ...] = ()
    action: Tuple[str, ...] = ()

    @classmethod
    def from_lists(cls, scenario: Sequence[Any], action: Sequence[Any]) -> 'KeywordSets':
        def clean(values):
            return tuple(str(v).strip() for v in values if str(v).strip())
        return cls(clean(scenario), clean(action))

    @property
    def empty(self) -> bool:
        return not self.scenario and not self.action


def parse_json_payload(text: str, expect: type = dict):
    """Parse the first JSON value of type `expect` in a model reply; None if absent."""
    if text is None:
        return None
    cleaned = _FENCE.sub('', text.strip())
    try:
        value = json.loads(cleaned)
        if isinstance(value, expect):
            return value
    except json.JSONDecodeError:
        pass
    opener, closer = ('{', '}') if expect is dict else ('[', ']')
    start, end = cleaned.find(opener), cleaned.rfind(closer)
    if start < 0 or end <= start:
        return None
    try:
        value = json.loads(cleaned[start:end + 1])
    except json.JSONDecodeError:
        return None
    return value if isinstance(value, expect) else None


def ask_json(registry: BackendRegistry, backend_id: str, prompt: str, params: SamplingParams,
             expect: type = dict, parse=None):
    """One request plus one re-ask on malformed JSON. Returns (value, last_reply)."""
    parse = parse or (lambda reply: parse_json_payload(reply, expect))
    messages = [ChatMessage('user', prompt)]
    reply = registry.generate(backend_id, messages, params)
    value = parse(reply)
    if value is not None:
        return value, reply
    messages = messages + [ChatMessage('assistant', reply or ''), ChatMessage('user', REASK_MESSAGE)]
    reply = registry.generate(backend_id, messages, params)
    return parse(reply), reply


def resolve_domain(task: TaskSpec, config: RunConfig) -> str:
    return task.domain_tag if task.domain_tag in DOMAIN_TAGS else config.domain_tag


def extract_keywords(registry: BackendRegistry, rectifier_backend_id: str, task: TaskSpec,
                     role: RoleSpec, candidate: str, params: SamplingParams = None,
                     prompts: PromptLibrary = None) -> KeywordSets:
    prompts = prompts or get_prompt_library()
    params = params or SamplingParams(temperature=0.0)
    prompt = prompts.render('keywords', task=task.question, role=role.name, agent_output=candidate)
    payload, reply = ask_json(registry, rectifier_backend_id, prompt, params)
    if payload is None:
        logger.warning(f"Keyword extraction for {role.name} returned malformed JSON twice; using empty keywords")
        return KeywordSets()
    scenario = payload.get('scenario') or []
    action = payload.get('action') or []
    if isinstance(scenario, str):
        scenario = [scenario]
    if isinstance(action, str):
        action = [action]
    return KeywordSets.from_lists(scenario, action)


def build_query(registry: BackendRegistry, keywords: KeywordSets) -> np.ndarray:
    if keywords.empty:
        return registry.embed(EMPTY_QUERY_TEXT)
    return registry.embed('\n'.join(list(keywords.scenario) + list(keywords.action)))


def _is_flawed(value) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ('true', 'false'):
        return value.strip().lower() == 'true'
    return None


def _meaningful(text: str) -> bool:
    return bool(text) and text.strip().upper() not in ('N/A', 'NA', 'NONE')


def evaluate_indicator(registry: BackendRegistry, rectifier_backend_id: str, candidate: str,
                       task: TaskSpec, role: RoleSpec, indicator: Indicator,
                       params: SamplingParams = None, prompts: PromptLibrary = None,
                       domain_tag: str = None, fail_closed: bool = False) -> Verdict:
    prompts = prompts or get_prompt_library()
    params = params or SamplingParams(temperature=0.0)
    template = prompts.rectifier_template(domain_tag or task.domain_tag)
    prompt = prompts.render(
        template,
        trigger_condition=indicator.trigger_condition,
        task=task.question,
        role=role.name,
        agent_output=candidate,
    )

    def parse(reply):
        payload = parse_json_payload(reply, dict)
        if payload is None or _is_flawed(payload.get('is_flawed')) is None:
            return None
        return payload

    payload, reply = ask_json(registry, rectifier_backend_id, prompt, params, parse=parse)
    if payload is None:
        logger.warning(f"Rectifier reply for {indicator.name} unparseable after re-ask; "
                       f"counting as {'violation' if fail_closed else 'pass'}")
        return Verdict(
            indicator_name=indicator.name,
            violated=fail_closed,
            rationale='',
            raw_fields={'parse_error': f"unparseable rectifier reply: {(reply or '')[:200]}"},
        )

    raw_fields = {name: str(payload.get(name, '')) for name in VERDICT_FIELDS}
    violated = _is_flawed(payload['is_flawed'])
    rationale = ''
    if violated:
        parts = [raw_fields['analysis'], raw_fields['suggestion']]
        rationale = '\n'.join(p for p in parts if _meaningful(p))
    return Verdict(indicator.name, violated, rationale, raw_fields)


def aggregate_verdicts(verdicts: Sequence[Verdict]) -> AggregateVerdict:
    """E = max v_k; F = violated verdicts in rank order."""
    feedback = tuple(
        FeedbackItem(
            indicator_name=v.indicator_name,
            rationale=v.rationale,
            suggestion=v.raw_fields.get('suggestion', ''),
            note=v.raw_fields.get('analysis', ''),
        )
        for v in verdicts if v.violated
    )
    return AggregateVerdict(error_state=bool(feedback), feedback=feedback)


def render_feedback(aggregate: AggregateVerdict, attempt: int, prompts: PromptLibrary = None) -> str:
    if not aggregate.error_state:
        raise ContractViolation("render_feedback called on a clean aggregate verdict")
    if attempt <= 0:
        raise ContractViolation("attempt must be positive")
    prompts = prompts or get_prompt_library()
    return prompts.render('feedback', attempt=attempt, feedback=aggregate.feedback)


@dataclass(frozen=True)
class Scrutiny:
    """Result of one scrutiny round."""
    active: Tuple[Indicator, ...]
    verdicts: Tuple[Verdict, ...]
    aggregate: AggregateVerdict
    keywords: Optional[KeywordSets] = None


class Rectifier:
    """Stateless scrutiny service over a backend registry."""

    def __init__(self, registry: BackendRegistry, config: RunConfig, prompts: PromptLibrary = None):
        self.registry = registry
        self.config = config
        self.prompts = prompts or get_prompt_library()

    def select_indicators(self, candidate: str, task: TaskSpec, role: RoleSpec,
                          pool: Optional[IndicatorPool]) -> Tuple[List[Indicator], Optional[KeywordSets]]:
        config = self.config
        if config.zero_shot:
            return [general_indicator(resolve_domain(task, config))], None

        if pool is None or len(pool) == 0:
            raise ContractViolation("retrieval needs a non-empty pool unless zero_shot is set")

        if config.retrieval_mode == 'random':
            digest = hashlib.sha256(candidate.encode('utf-8')).digest()
            seed = config.seed * 1_000_003 + int.from_bytes(digest[:4], 'big')
            return [hit.indicator for hit in retrieve_random_k(pool, config.k_act, seed)], None

        keywords = extract_keywords(self.registry, config.rectifier_backend_id, task, role, candidate,
                                    params=config.rectifier_sampling, prompts=self.prompts)
        query = build_query(self.registry, keywords)
        pool.ensure_embeddings(self.registry)
        hits = retrieve_top_k(pool, query, config.k_act)
        return [hit.indicator for hit in hits], keywords

    def scrutinize(self, candidate: str, task: TaskSpec, role: RoleSpec,
                   pool: Optional[IndicatorPool]) -> Scrutiny:
        active, keywords = self.select_indicators(candidate, task, role, pool)
        domain = resolve_domain(task, self.config)

        def evaluate(indicator: Indicator) -> Verdict:
            return evaluate_indicator(
                self.registry, self.config.rectifier_backend_id, candidate, task, role, indicator,
                params=self.config.rectifier_sampling, prompts=self.prompts,
                domain_tag=domain, fail_closed=self.config.fail_closed,
            )

        workers = min(self.config.max_parallel_checks, len(active))
        if workers <= 1:
            verdicts = [evaluate(ind) for ind in active]
        else:
            # map() yields in submission order, i.e. rank order
            with ThreadPoolExecutor(max_workers=workers) as pool_executor:
                verdicts = list(pool_executor.map(evaluate, active))

        aggregate = aggregate_verdicts(verdicts)
        flagged = [v.indicator_name for v in verdicts if v.violated]
        logger.info(f"Scrutiny of {role.name}: {len(active)} indicators, flagged={flagged or 'none'}")
        return Scrutiny(tuple(active), tuple(verdicts), aggregate, keywords)
