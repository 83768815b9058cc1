import json

import pytest

from sparsewm.config import Config
from sparsewm.errors import ConfigError


def write_toml(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = Config()
    assert cfg.get('seed') == 0
    assert cfg.get('plan.samples') == 100
    assert cfg.get('env')['grid'] == 16
    with pytest.raises(ConfigError):
        cfg.get('plan.nothing')


def test_toml_overlay(tmp_path):
    cfg = Config(write_toml(tmp_path, "seed = 7\n[plan]\nhorizon = 3\nstrategy = 'lhs'\n"))
    assert cfg.get('seed') == 7
    assert cfg.get('plan.horizon') == 3
    assert cfg.get('plan.samples') == 100
    assert cfg.plan_config().strategy == 'lhs'


def test_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        Config(write_toml(tmp_path, "[plan]\nsmaples = 3\n"))
    with pytest.raises(ConfigError):
        Config(write_toml(tmp_path, "plan = 3\n"))
    with pytest.raises(ConfigError):
        Config(write_toml(tmp_path, "[plan\n"))
    with pytest.raises(ConfigError):
        Config(str(tmp_path / "missing.toml"))


def test_set_and_unset():
    cfg = Config()
    cfg.set('model.n_layers', 3)
    assert cfg.get('model.n_layers') == 3
    cfg.unset('model.n_layers')
    assert cfg.get('model.n_layers') == 2
    cfg.unset('model.n_layers')
    with pytest.raises(ConfigError):
        cfg.set('model.depth', 3)


def test_digest_tracks_values():
    a, b = Config(), Config()
    assert a.digest() == b.digest()
    b.set('seed', 1)
    assert a.digest() != b.digest()
    b.set('seed', 0)
    assert a.digest() == b.digest()


def test_typed_views():
    cfg = Config()
    cfg.set('env.grid', 32)
    assert cfg.env_config().n_tokens == 64
    model = cfg.model_config()
    assert model.n_tokens == 64 and model.token_dim == 16
    assert cfg.plan_config().calls_per_plan == 5000
    run = cfg.run_config()
    assert run.drop_ratios == [0.0, 0.3, 0.5, 0.9]
    assert run.cells()[0] == ('full', 0.0)


def test_bad_values_raise_config_errors():
    cfg = Config()
    cfg.set('plan.elites', 500)
    with pytest.raises(ConfigError):
        cfg.plan_config()
    cfg = Config()
    cfg.set('env.patch', 5)
    with pytest.raises(ConfigError):
        cfg.env_config()


def test_write(tmp_path):
    cfg = Config()
    cfg.set('train.steps', 10)
    path = str(tmp_path / "effective.json")
    cfg.write(path)
    with open(path) as f:
        assert json.load(f)['train']['steps'] == 10


def test_readout_schedule_overridable(tmp_path):
    assert (Config().get('analysis.probe_epochs'), Config().get('analysis.probe_lr')) == (200, 1e-3)
    cfg = Config(write_toml(tmp_path, "[analysis]\nprobe_epochs = 500\nprobe_lr = 1e-5\n"))
    assert cfg.get('analysis.probe_epochs') == 500
    assert cfg.get('analysis.probe_lr') == 1e-5
