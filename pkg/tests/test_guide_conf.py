import math
from pathlib import Path

import orjson
import pytest

from stackguide.baseline import BaselineConfig
from stackguide.conf import RunConfig, default_data_dir, from_dict, load_conf, parse_prop, to_dict
from stackguide.error import ConfigError
from stackguide.net import NetConfig
from stackguide.synth import SamplerConfig


def test_parse_prop():
    assert parse_prop('sampler.zoom_max=4') == ('sampler.zoom_max', 4)
    assert parse_prop('stack.path=data/stack.json') == ('stack.path', 'data/stack.json')
    assert parse_prop('net.stage_widths=[8,16]') == ('net.stage_widths', [8, 16])
    with pytest.raises(ConfigError):
        parse_prop('seed')


def test_props_override_file(tmp_path):
    (tmp_path / 'run.json').write_bytes(orjson.dumps({
        'seed': 3,
        'sampler': {'zoom_max': 4.0, '#comment': 'ignored'},
        '_props': {'sampler.view_size': 128},
    }))
    run = load_conf(tmp_path / 'run.json', ['sampler.zoom_max=6', 'net.head=both'], seed=7)
    assert run.seed == 7
    assert run.section('sampler') == {'zoom_max': 6, 'view_size': 128}
    assert run.section('net') == {'head': 'both'}
    assert run.base_dir == tmp_path


def test_expressions():
    run = load_conf({'sampler': {'tilt_max': '=radians(10)', 'yaw_range': '=2*pi'}, 'stack': {'path': '==x'}})
    assert run.section('sampler')['tilt_max'] == pytest.approx(math.radians(10))
    assert run.section('sampler')['yaw_range'] == pytest.approx(2 * math.pi)
    assert run.section('stack')['path'] == '=x'
    with pytest.raises(ConfigError):
        load_conf({'sampler': {'tilt_max': '=radians('}})


def test_environment_variable(monkeypatch):
    monkeypatch.setenv('GUIDE_TEST_ROOT', '/data')
    assert load_conf({'stack': {'path': '$GUIDE_TEST_ROOT/stack.json'}}).section('stack')['path'] == '/data/stack.json'
    monkeypatch.delenv('GUIDE_TEST_ROOT')
    with pytest.raises(ConfigError):
        load_conf({'stack': {'path': '$GUIDE_TEST_ROOT/stack.json'}})


def test_unknown_section():
    with pytest.raises(ConfigError):
        load_conf({'optimizer': {}})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_conf(tmp_path / 'missing.json')


def test_build_rejects_unknown_keys():
    with pytest.raises(ConfigError, match='zoom_maxx'):
        load_conf({'sampler': {'zoom_maxx': 2}}).build('sampler', SamplerConfig)


def test_build_invalid_value():
    with pytest.raises(ConfigError, match='sampler'):
        load_conf({'sampler': {'zoom_min': 3, 'zoom_max': 2}}).build('sampler', SamplerConfig)


def test_lists_become_tuples():
    cfg = from_dict(NetConfig, {'stage_widths': [8, 16], 'blocks_per_stage': [1, 1]})
    assert cfg.stage_widths == (8, 16)
    assert from_dict(NetConfig, to_dict(cfg)) == cfg
    assert from_dict(BaselineConfig, None) == BaselineConfig()


def test_hash_ignores_comments_and_order():
    a = RunConfig({'seed': 1, 'sampler': {'zoom_max': 4, 'zoom_min': 1}})
    b = RunConfig({'sampler': {'zoom_min': 1, 'zoom_max': 4, '#why': 'smaller'}, 'seed': 1})
    assert a.hash == b.hash
    assert a.hash != RunConfig({'seed': 2, 'sampler': {'zoom_max': 4, 'zoom_min': 1}}).hash


def test_add_props():
    run = load_conf({'seed': 1}) + {'train.batch_size': 4}
    assert run.section('train') == {'batch_size': 4}
    assert run.threads == 1
    assert run.out is None


def test_resolve_path(tmp_path):
    (tmp_path / 'run.json').write_bytes(orjson.dumps({'out': 'results'}))
    run = load_conf(tmp_path / 'run.json')
    assert run.out == tmp_path / 'results'
    assert run.resolve_path('stack/stack.json') == tmp_path / 'stack' / 'stack.json'
    assert run.resolve_path('/abs/path').as_posix() == '/abs/path'


def test_default_data_dir(tmpdir):
    assert default_data_dir().as_posix() == (tmpdir / 'guide').strpath


def test_run_file():
    path = Path(__file__).parent / 'data' / 'run.json'
    run = load_conf(path, ['seed=4'])
    assert run.seed == 4
    sampler = run.build('sampler', SamplerConfig)
    assert sampler.tilt_max == pytest.approx(math.radians(10))
    assert (sampler.zoom_max, sampler.view_size) == (4.0, 128)
    assert run.build('net', NetConfig).stage_widths == (8, 16)
    assert run.resolve_path(run.section('stack')['path']) == path.parent / 'stack' / 'stack.json'
    assert run.hash == load_conf(path, ['seed=4']).hash
    assert run.hash != load_conf(path).hash
