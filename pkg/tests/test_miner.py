import json
import re

import pytest

from conftest import dedup_oracle, make_trajectory, passed_outcome
from rectiflow.domain import RunConfig, TaskSpec
from rectiflow.indicator_pool import load_pool
from rectiflow.miner import (
    MAX_CANDIDATES_PER_CALL,
    PoolBuilder,
    _candidate_from,
    _parse_teacher_reply,
    collect_failures,
    is_failure,
    mine_indicators,
    normalize_indicator_name,
)
from rectiflow.runtime import ScriptedRouting, TaskRunner

QUESTION = re.compile(r'Question (Q\d)')
FAILING = {'Q2', 'Q4'}


def teacher_object(label):
    return {
        'name': f'{label} Error Pattern',
        'domain_tag': 'Arithmetic',
        'detailed_definition': f'This error occurs when the agent mishandles {label}, leading to a wrong sum.',
        'evaluator_prompt': {'trigger_condition': f'When the agent works with {label}.'},
        'example_error': 'Error Snippet: 3 + 4 = 8 | Correction Logic: 3 + 4 = 7.',
    }


def agent_reply(messages, params):
    qid = QUESTION.search(messages[1].content).group(1)
    role = messages[0].content
    if 'Decider' in role:
        return '\\boxed{0}' if qid in FAILING else '\\boxed{7}'
    if 'Solver' in role:
        return f'Solver work on {qid}'
    return 'Checker looks fine'


def teacher_reply(messages, params):
    prompt = messages[0].content
    if 'Solver work on Q2' in prompt:
        return json.dumps([teacher_object('alpha'), teacher_object('beta')])
    if 'Solver work on Q4' in prompt:
        return json.dumps([teacher_object('alpha')])
    return 'NO_ERROR'


@pytest.fixture
def dataset():
    return [TaskSpec(f'Q{i}', f'Question Q{i}: what is 3 + 4?', gold_answer='7') for i in range(1, 6)]


@pytest.fixture
def roster(agent_spec):
    return [agent_spec('Solver', backend_id='agent'), agent_spec('Checker', backend_id='agent'),
            agent_spec('Decider', backend_id='agent', is_decision=True)]


@pytest.fixture
def policy():
    return ScriptedRouting(('Solver', 'Checker', 'Decider'))


@pytest.fixture
def runner(make_registry, scripted, prompts):
    def factory(teacher=teacher_reply):
        registry = make_registry({
            'agent': scripted('agent', responder=agent_reply),
            'teacher': scripted('teacher', responder=teacher),
            'dedup': scripted('dedup', responder=dedup_oracle),
        })
        return TaskRunner(registry, prompts)
    return factory


class TestBuildPool:
    def test_two_failures_yield_two_novel_indicators(self, runner, dataset, roster, policy, tmp_path):
        out = tmp_path / 'pool.jsonl'
        stats = PoolBuilder(runner(), RunConfig()).build_pool(dataset, roster, policy, out)

        assert stats.to_dict() == {
            'tasks': 5, 'failures': 2, 'candidates': 3, 'inserted': 2,
            'duplicates_dropped': 1, 'parse_failures': 0, 'skipped_tasks': 0,
        }
        pool = load_pool(out, 8)
        assert [ind.name for ind in pool] == ['ALPHA_ERROR_PATTERN', 'BETA_ERROR_PATTERN']
        assert all(ind.embedding_condition is not None for ind in pool)

        log = [json.loads(line) for line in out.with_suffix('.buildlog.jsonl').read_text(encoding='utf-8').splitlines()]
        assert [(r['task_id'], r['role'], r['decision']) for r in log] == [
            ('Q2', 'Solver', 'inserted'), ('Q2', 'Solver', 'inserted'), ('Q4', 'Solver', 'duplicate')]

    def test_rebuild_is_byte_identical(self, runner, dataset, roster, policy, tmp_path):
        first, second = tmp_path / 'a.jsonl', tmp_path / 'b.jsonl'
        PoolBuilder(runner(), RunConfig()).build_pool(dataset, roster, policy, first)
        PoolBuilder(runner(), RunConfig()).build_pool(dataset, roster, policy, second)
        assert first.read_bytes() == second.read_bytes()

    def test_dedup_disabled_keeps_duplicates(self, runner, dataset, roster, policy, tmp_path):
        stats = PoolBuilder(runner(), RunConfig(dedup_enabled=False)).build_pool(
            dataset, roster, policy, tmp_path / 'pool.jsonl')
        assert (stats.inserted, stats.duplicates_dropped) == (3, 0)

    def test_no_failures_writes_empty_pool(self, runner, dataset, roster, policy, tmp_path):
        solved = [t for t in dataset if t.id not in FAILING]
        out = tmp_path / 'pool.jsonl'
        stats = PoolBuilder(runner(), RunConfig()).build_pool(solved, roster, policy, out)
        assert stats.failures == 0 and stats.inserted == 0
        assert out.read_text(encoding='utf-8') == ''

    def test_unparseable_teacher_counts_parse_failures(self, runner, dataset, roster, policy, tmp_path):
        stats = PoolBuilder(runner(teacher=lambda m, p: 'I cannot answer'), RunConfig()).build_pool(
            dataset, roster, policy, tmp_path / 'pool.jsonl', build_log_path=tmp_path / 'log.jsonl')
        # Solver and Checker of both failed tasks
        assert stats.parse_failures == stats.candidates == 4
        assert stats.inserted == 0
        assert len((tmp_path / 'log.jsonl').read_text(encoding='utf-8').splitlines()) == 4

    def test_teacher_backend_required(self, make_registry, prompts, dataset, roster, policy, tmp_path):
        runner = TaskRunner(make_registry({}), prompts)
        with pytest.raises(ValueError, match='teacher'):
            PoolBuilder(runner, RunConfig()).build_pool(dataset, roster, policy, tmp_path / 'pool.jsonl')


def test_collect_failures_runs_without_scrutiny(runner, dataset, roster, policy):
    failures, skipped = collect_failures(runner(), dataset, roster, policy, RunConfig(), jobs=2)
    assert [t.task.id for t in failures] == ['Q2', 'Q4']
    assert skipped == 0
    assert all(r.active_indicators == () for t in failures for s in t.steps for r in s.outcome.history)


def test_collect_failures_needs_gold(runner, roster, policy):
    with pytest.raises(ValueError, match='Q9'):
        collect_failures(runner(), [TaskSpec('Q9', 'Question Q9: ?')], roster, policy, RunConfig())


def test_is_failure():
    assert is_failure(make_trajectory(final_answer=None))
    assert is_failure(make_trajectory(final_answer='\\boxed{5}'))
    assert not is_failure(make_trajectory(final_answer='\\boxed{4}'))


class TestMineIndicators:
    def failure(self):
        return make_trajectory('Q2', [passed_outcome()], final_answer='\\boxed{5}')

    def mine(self, make_registry, scripted, prompts, reply):
        registry = make_registry({'teacher': scripted('teacher', rules=[((), reply)])})
        return mine_indicators(registry, 'teacher', self.failure(), 0, prompts=prompts)

    def test_no_error_sentinel(self, make_registry, scripted, prompts):
        assert self.mine(make_registry, scripted, prompts, 'NO_ERROR') == []
        assert _parse_teacher_reply('```\nNO_ERROR\n```') == []

    def test_overflow_is_capped(self, make_registry, scripted, prompts):
        reply = json.dumps([teacher_object(f'item{i}') for i in range(7)])
        mined = self.mine(make_registry, scripted, prompts, reply)
        assert len(mined) == MAX_CANDIDATES_PER_CALL
        assert mined[0].source_task_id == 'Q2' and mined[0].source_role == 'role0'

    def test_single_object_accepted(self, make_registry, scripted, prompts):
        mined = self.mine(make_registry, scripted, prompts, 'Here it is: ' + json.dumps(teacher_object('gamma')))
        assert [m.indicator.name for m in mined] == ['GAMMA_ERROR_PATTERN']
        assert mined[0].indicator.trigger_condition == 'When the agent works with gamma.'

    def test_double_escaped_latex_is_unescaped(self, make_registry, scripted, prompts):
        obj = teacher_object('fractions')
        obj['detailed_definition'] = 'This error occurs when the agent inverts \\\\frac{1}{2}.'
        mined = self.mine(make_registry, scripted, prompts, json.dumps([obj]))
        assert mined[0].indicator.definition == 'This error occurs when the agent inverts \\frac{1}{2}.'

    def test_lone_backslash_is_repaired(self):
        reply = '[{"name": "ROOTS", "definition": "misreads \\sqrt{x}", "trigger_condition": "roots"}]'
        assert _parse_teacher_reply(reply)[0]['definition'] == 'misreads \\sqrt{x}'

    def test_single_escaped_latex_commands_survive(self):
        reply = ('[{"name": "FRACTIONS", "definition": "Misreads \\frac{1}{2} as 2", '
                 '"trigger_condition": "When \\times and \\neq appear with \\binom and \\right"}]')
        candidate = _candidate_from(_parse_teacher_reply(reply)[0], 'q1', 'Solver')
        assert candidate.indicator.definition == 'Misreads \\frac{1}{2} as 2'
        assert candidate.indicator.trigger_condition == 'When \\times and \\neq appear with \\binom and \\right'

    def test_single_escaped_latex_in_single_object_reply(self):
        reply = '{"name": "ROOTS", "definition": "drops \\sqrt and \\frac terms", "trigger_condition": "roots"}'
        assert _parse_teacher_reply(reply)[0]['definition'] == 'drops \\sqrt and \\frac terms'

    def test_malformed_objects_are_dropped(self, make_registry, scripted, prompts):
        reply = json.dumps([{'name': 'NO_DEFINITION'}, teacher_object('delta')])
        assert len(self.mine(make_registry, scripted, prompts, reply)) == 1


def test_normalize_indicator_name():
    assert normalize_indicator_name('Integer Condition Mismanagement') == 'INTEGER_CONDITION_MISMANAGEMENT'
    assert normalize_indicator_name('  off-by-one (loop) ') == 'OFF_BY_ONE_LOOP'
    assert normalize_indicator_name('ALREADY_OK') == 'ALREADY_OK'
