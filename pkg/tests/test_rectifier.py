import itertools
import json

import pytest
from hypothesis import given, strategies as st

from conftest import CLEAN_VERDICT, flawed_verdict, make_indicator
from rectiflow.domain import (
    AggregateVerdict,
    ContractViolation,
    FeedbackItem,
    RoleSpec,
    RunConfig,
    Verdict,
)
from rectiflow.indicator_pool import IndicatorPool
from rectiflow.rectifier import (
    EMPTY_QUERY_TEXT,
    KeywordSets,
    Rectifier,
    aggregate_verdicts,
    build_query,
    evaluate_indicator,
    extract_keywords,
    parse_json_payload,
    render_feedback,
)

ROLE = RoleSpec('Solver', 'You are the Solver.')
NAMES = ('ALPHA', 'BETA', 'GAMMA', 'DELTA', 'EPSILON')
KEYWORDS = json.dumps({'scenario': ['arithmetic'], 'action': ['adding numbers']})


def verdict(name, violated):
    raw = {'analysis': f'{name} analysis', 'suggestion': f'{name} fix'} if violated else {}
    return Verdict(name, violated, f'{name} analysis' if violated else '', raw)


@pytest.mark.parametrize('pattern', list(itertools.product((False, True), repeat=5)))
def test_aggregate_is_max_with_rank_ordered_feedback(pattern):
    aggregate = aggregate_verdicts([verdict(n, v) for n, v in zip(NAMES, pattern)])
    assert aggregate.error_state == any(pattern)
    assert [item.indicator_name for item in aggregate.feedback] == [n for n, v in zip(NAMES, pattern) if v]
    assert all(item.suggestion == f'{item.indicator_name} fix' for item in aggregate.feedback)


@given(st.lists(st.tuples(st.sampled_from(NAMES), st.booleans()), max_size=12))
def test_aggregate_error_state_matches_any_violation(pairs):
    aggregate = aggregate_verdicts([verdict(name, violated) for name, violated in pairs])
    assert aggregate.error_state == any(violated for _, violated in pairs)
    assert len(aggregate.feedback) == sum(violated for _, violated in pairs)


def test_aggregate_of_nothing_is_clean():
    assert aggregate_verdicts([]) == AggregateVerdict(False)


def pattern_responder(flagged):
    """Keywords for the extractor, otherwise flawed when the prompt names a flagged trigger."""
    def respond(messages, params):
        prompt = messages[0].content
        if 'Keyword Extractor' in prompt:
            return KEYWORDS
        for name in NAMES:
            if f'trigger of {name}' in prompt:
                return flawed_verdict(f'{name} broke it', f'{name} fix') if name in flagged else CLEAN_VERDICT
        return None
    return respond


@pytest.fixture
def pool():
    return IndicatorPool(8, [make_indicator(name) for name in NAMES])


@pytest.mark.parametrize('pattern', list(itertools.product((False, True), repeat=5)))
def test_scrutinize_flags_exactly_the_violated_indicators(pattern, pool, make_registry, scripted, task, prompts):
    flagged = {name for name, bit in zip(NAMES, pattern) if bit}
    registry = make_registry({'rectifier': scripted('rectifier', responder=pattern_responder(flagged))})
    rectifier = Rectifier(registry, RunConfig(k_act=5), prompts)

    scrutiny = rectifier.scrutinize('2 + 2 = \\boxed{4}', task, ROLE, pool)

    assert sorted(ind.name for ind in scrutiny.active) == sorted(NAMES)
    assert scrutiny.aggregate.error_state == bool(flagged)
    expected = [ind.name for ind in scrutiny.active if ind.name in flagged]
    assert [item.indicator_name for item in scrutiny.aggregate.feedback] == expected
    assert scrutiny.keywords == KeywordSets(('arithmetic',), ('adding numbers',))


def test_scrutinize_respects_k_act(pool, make_registry, scripted, task, prompts):
    registry = make_registry({'rectifier': scripted('rectifier', responder=pattern_responder(set()))})
    scrutiny = Rectifier(registry, RunConfig(k_act=2), prompts).scrutinize('x', task, ROLE, pool)
    assert len(scrutiny.active) == 2
    assert len(scrutiny.verdicts) == 2


def test_zero_shot_uses_general_indicator_without_pool(make_registry, scripted, task, prompts):
    backend = scripted('rectifier', rules=[('mathematical reasoning', CLEAN_VERDICT)])
    registry = make_registry({'rectifier': backend})
    scrutiny = Rectifier(registry, RunConfig(zero_shot=True), prompts).scrutinize('x', task, ROLE, None)
    assert [ind.name for ind in scrutiny.active] == ['CRITICAL_MATH_LOGIC_AUDIT']
    assert scrutiny.keywords is None
    assert len(backend.calls) == 1


def test_retrieval_without_pool_is_a_contract_violation(make_registry, scripted, task, prompts):
    registry = make_registry({'rectifier': scripted('rectifier', responder=pattern_responder(set()))})
    with pytest.raises(ContractViolation):
        Rectifier(registry, RunConfig(), prompts).scrutinize('x', task, ROLE, IndicatorPool(8))


def test_random_retrieval_is_deterministic(pool, make_registry, scripted, task, prompts):
    registry = make_registry({'rectifier': scripted('rectifier', responder=pattern_responder(set()))})
    rectifier = Rectifier(registry, RunConfig(k_act=3, retrieval_mode='random'), prompts)
    first = rectifier.scrutinize('same text', task, ROLE, pool)
    second = rectifier.scrutinize('same text', task, ROLE, pool)
    assert first.active == second.active
    assert first.keywords is None


class TestEvaluateIndicator:
    indicator = make_indicator('ALPHA')

    def test_garbage_then_valid_reply_uses_reask(self, make_registry, scripted, task, prompts):
        backend = scripted('rectifier', rules=[('not valid JSON', flawed_verdict()), ('Objective', 'garbage')])
        registry = make_registry({'rectifier': backend})
        result = evaluate_indicator(registry, 'rectifier', 'x', task, ROLE, self.indicator, prompts=prompts)
        assert result.violated
        assert result.rationale == 'The step is wrong.\nFix the step.'
        assert len(backend.calls) == 2

    @pytest.mark.parametrize('fail_closed', [False, True])
    def test_unparseable_twice_follows_fail_mode(self, fail_closed, make_registry, scripted, task, prompts):
        registry = make_registry({'rectifier': scripted('rectifier', rules=[((), 'no json here')])})
        result = evaluate_indicator(registry, 'rectifier', 'x', task, ROLE, self.indicator,
                                    prompts=prompts, fail_closed=fail_closed)
        assert result.violated is fail_closed
        assert 'parse_error' in result.raw_fields

    def test_string_boolean_accepted(self, make_registry, scripted, task, prompts):
        reply = '```json\n{"analysis": "N/A", "suggestion": "N/A", "is_flawed": "false"}\n```'
        registry = make_registry({'rectifier': scripted('rectifier', rules=[((), reply)])})
        result = evaluate_indicator(registry, 'rectifier', 'x', task, ROLE, self.indicator, prompts=prompts)
        assert not result.violated
        assert result.rationale == ''

    def test_code_domain_uses_code_template(self, make_registry, scripted, task, prompts):
        backend = scripted('rectifier', rules=[((), CLEAN_VERDICT)])
        registry = make_registry({'rectifier': backend})
        evaluate_indicator(registry, 'rectifier', 'def f(): pass', task, ROLE, self.indicator,
                           prompts=prompts, domain_tag='code')
        assert 'Objective Logic Auditor' not in backend.calls[0][0].content


class TestKeywords:
    def test_malformed_twice_gives_empty_sets_and_fallback_query(self, make_registry, scripted, task, prompts):
        registry = make_registry({'rectifier': scripted('rectifier', rules=[((), 'nothing useful')])})
        keywords = extract_keywords(registry, 'rectifier', task, ROLE, 'x', prompts=prompts)
        assert keywords.empty
        assert (build_query(registry, keywords) == registry.embed(EMPTY_QUERY_TEXT)).all()

    def test_string_values_become_single_item_lists(self, make_registry, scripted, task, prompts):
        reply = json.dumps({'scenario': 'geometry', 'action': ['', 'measuring angles']})
        registry = make_registry({'rectifier': scripted('rectifier', rules=[((), reply)])})
        keywords = extract_keywords(registry, 'rectifier', task, ROLE, 'x', prompts=prompts)
        assert keywords == KeywordSets(('geometry',), ('measuring angles',))


def test_parse_json_payload_finds_embedded_object():
    assert parse_json_payload('Sure! {"a": 1} hope that helps', dict) == {'a': 1}
    assert parse_json_payload('prefix [1, 2] suffix', list) == [1, 2]
    assert parse_json_payload('{"a": 1}', list) is None
    assert parse_json_payload(None) is None


class TestRenderFeedback:
    aggregate = AggregateVerdict(True, (
        FeedbackItem('INTEGER_CONDITION_MISMANAGEMENT', 'r', 'Allow n = 0', 'n = 0 is dropped'),
        FeedbackItem('MODULAR_ARITHMETIC_CONTEXT_CHECK', 'r', 'Check the bound', 'bound is loose'),
    ))

    def test_lists_each_flag_in_order(self, prompts):
        text = render_feedback(self.aggregate, 1, prompts)
        assert '(Attempt 1)' in text
        first = text.index('[INTEGER_CONDITION_MISMANAGEMENT]: Allow n = 0')
        second = text.index('[MODULAR_ARITHMETIC_CONTEXT_CHECK]: Check the bound')
        assert first < second
        assert "(Auditor's Note: n = 0 is dropped)" in text

    def test_clean_aggregate_rejected(self, prompts):
        with pytest.raises(ContractViolation):
            render_feedback(AggregateVerdict(False), 1, prompts)

    def test_attempt_must_be_positive(self, prompts):
        with pytest.raises(ContractViolation):
            render_feedback(self.aggregate, 0, prompts)
