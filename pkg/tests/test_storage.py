import json

import pytest

from conftest import make_trajectory, passed_outcome, rejected_outcome
from rectiflow.domain import ConfigurationError
from rectiflow.storage import load_dataset, load_trajectories, trajectory_filename, write_trajectory


def write_lines(path, rows):
    path.write_text('\n'.join(rows) + '\n', encoding='utf-8')
    return path


class TestLoadDataset:
    def test_reads_rows(self, tmp_path):
        path = write_lines(tmp_path / 'data.jsonl', [
            json.dumps({'id': 'a', 'question': 'q1', 'gold_answer': '1'}),
            '',
            json.dumps({'id': 'b', 'question': 'q2'}),
        ])
        tasks = load_dataset(path)
        assert [t.id for t in tasks] == ['a', 'b']
        assert tasks[1].gold_answer is None

    def test_every_issue_names_its_line(self, tmp_path):
        path = write_lines(tmp_path / 'data.jsonl', [
            json.dumps({'id': 'a', 'question': 'q1', 'gold_answer': '1'}),
            '{not json',
            json.dumps({'id': 'a', 'question': 'q3', 'gold_answer': '3'}),
            json.dumps({'id': 'c', 'question': 'q4'}),
        ])
        with pytest.raises(ConfigurationError) as excinfo:
            load_dataset(path, require_gold=True)
        issues = excinfo.value.issues
        assert any(issue.startswith('dataset line 2: invalid JSON') for issue in issues)
        assert any("dataset line 3: duplicate task id 'a'" in issue for issue in issues)
        assert any("dataset line 4: task 'c' has no gold_answer" in issue for issue in issues)

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'data.jsonl'
        path.write_text('', encoding='utf-8')
        assert load_dataset(path) == []


class TestTrajectoryFiles:
    def test_write_then_load_directory(self, tmp_path):
        first = make_trajectory('t/1', [passed_outcome(1)], final_answer='\\boxed{4}')
        second = make_trajectory('t2', [rejected_outcome(2)])
        write_trajectory(tmp_path, first)
        write_trajectory(tmp_path, second)

        assert trajectory_filename('t/1') == 't_1.jsonl'
        loaded, unreadable = load_trajectories(tmp_path)
        assert unreadable == []
        assert sorted(t.task.id for t in loaded) == ['t/1', 't2']
        assert {t.task.id: t for t in loaded}['t/1'] == first

    def test_unreadable_files_are_reported(self, tmp_path):
        write_trajectory(tmp_path, make_trajectory('good', [passed_outcome()]))
        (tmp_path / 'bad.jsonl').write_text('{"task": {}}\n', encoding='utf-8')
        loaded, unreadable = load_trajectories(tmp_path)
        assert [t.task.id for t in loaded] == ['good']
        assert unreadable == [tmp_path / 'bad.jsonl']

    def test_single_file(self, tmp_path):
        path = write_trajectory(tmp_path, make_trajectory('only', [passed_outcome()]))
        loaded, _ = load_trajectories(path)
        assert len(loaded) == 1

    def test_missing_directory_is_unreadable(self, tmp_path):
        assert load_trajectories(tmp_path / 'nowhere') == ([], [tmp_path / 'nowhere'])
