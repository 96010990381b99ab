import json
import os

import pytest

from app import load_manifest, main, write_csv
from config import Config
from errors import ConfigError
from history_manager import RunHistory

IDENTITY = """
[field]
family = identity
dimension = 3

[grids]
points_per_decade = 12
decades = 6
harmonic_degree = 4

[run]
commands = classify, means
seed = 7
"""


def _write(tmp_path, text, name='manifest.ini'):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.fixture(autouse=True)
def _scratch_temp_folder(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, 'TEMP_FOLDER', str(tmp_path / 'temp'))


def test_manifest_defaults_and_overrides(tmp_path):
    manifest = load_manifest(_write(tmp_path, IDENTITY))
    assert manifest.commands == ['classify', 'means']
    assert manifest.seed == 7
    assert manifest.pole == [0.0, 0.0, 0.0]
    assert manifest.points_per_decade == 12
    overridden = load_manifest(_write(tmp_path, IDENTITY), seed=3, tol_scale=2.0)
    assert overridden.seed == 3 and overridden.tol_scale == 2.0


@pytest.mark.parametrize("text", [
    IDENTITY + "\n[extra]\nkey = 1\n",
    IDENTITY.replace("seed = 7", "seed = 7\ncolour = blue"),
    IDENTITY.replace("classify, means", "classify, integrate"),
    IDENTITY.replace("classify, means", ""),
    IDENTITY.replace("seed = 7", "seed = 7\npole = 0.1, 0.2"),
    IDENTITY.replace("decades = 6", "decades = -1"),
    "[field]\nfamily = identity\n",
])
def test_invalid_manifests_are_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_manifest(_write(tmp_path, text))


def test_missing_manifest_file(tmp_path):
    with pytest.raises(ConfigError):
        load_manifest(str(tmp_path / 'absent.ini'))


def test_main_reports_invalid_manifest(tmp_path):
    out = tmp_path / 'out'
    path = _write(tmp_path, IDENTITY.replace("classify, means", "classify, integrate"))
    assert main(['--manifest', path, '--out', str(out)]) == 2
    summary = (out / 'summary.txt').read_text()
    assert summary.startswith('[manifest]')
    assert 'status: fail' in summary


def test_unknown_field_family_fails_the_run(tmp_path):
    out = tmp_path / 'out'
    path = _write(tmp_path, IDENTITY.replace("family = identity", "family = spiral"))
    assert main(['--manifest', path, '--out', str(out)]) == 1
    assert '[setup]' in (out / 'summary.txt').read_text()


def test_identity_run_writes_artifacts(tmp_path):
    out = tmp_path / 'out'
    assert main(['--manifest', _write(tmp_path, IDENTITY), '--out', str(out)]) == 0
    for name in ('summary.txt', 'history.json', 'profile.csv', 'means.csv'):
        assert (out / name).exists(), name
    summary = (out / 'summary.txt').read_text()
    assert '[classify]' in summary and '[means]' in summary
    assert 'status: fail' not in summary
    entry = RunHistory(str(out)).get_recent_runs(1)[0]
    assert entry['passed'] and entry['seed'] == 7
    assert entry['outcomes'] == {'classify': True, 'means': True}


def test_runs_are_reproducible(tmp_path):
    path = _write(tmp_path, IDENTITY)
    first, second = tmp_path / 'a', tmp_path / 'b'
    assert main(['--manifest', path, '--out', str(first)]) == 0
    assert main(['--manifest', path, '--out', str(second)]) == 0
    for name in ('profile.csv', 'means.csv', 'summary.txt'):
        assert (first / name).read_text() == (second / name).read_text(), name


def test_csv_carries_a_provenance_line(tmp_path):
    path = str(tmp_path / 'table.csv')
    provenance = json.dumps({'seed': 1})
    write_csv(path, ['r', 'value'], [[0.5, 1], [0.25, 2]], provenance)
    with open(path) as handle:
        lines = handle.read().splitlines()
    assert lines[0] == '# {"seed": 1}'
    assert lines[1] == 'r,value'
    assert lines[2] == '0.5,1'
    assert os.path.getsize(path) > 0
