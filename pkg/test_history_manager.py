from history_manager import RunHistory


def test_runs_are_stored_most_recent_first(tmp_path):
    history = RunHistory(str(tmp_path))
    assert history.load_history() == []
    first = history.save_run('a.ini', 1, ['classify'], {'classify': True}, {'seed': 1})
    second = history.save_run('b.ini', 2, ['means'], {'means': False}, {'seed': 2})
    runs = history.get_recent_runs()
    assert [run['id'] for run in runs] == [second, first]
    assert runs[0]['passed'] is False and runs[1]['passed'] is True
    assert history.get_run_by_id(first)['manifest'] == 'a.ini'
    assert history.get_run_by_id('missing') is None


def test_run_without_outcomes_does_not_pass(tmp_path):
    history = RunHistory(str(tmp_path))
    run_id = history.save_run('a.ini', 1, [], {}, {})
    assert history.get_run_by_id(run_id)['passed'] is False


def test_clear_and_corrupt_history(tmp_path):
    history = RunHistory(str(tmp_path))
    history.save_run('a.ini', 1, ['classify'], {'classify': True}, {})
    assert history.clear_history()
    assert history.load_history() == []
    with open(history.history_file, 'w') as handle:
        handle.write('{not json')
    assert history.load_history() == []
    with open(history.history_file) as handle:
        assert handle.read() == '{not json'
