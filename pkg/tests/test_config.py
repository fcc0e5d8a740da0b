import json

import pytest

from services.errors import ConfigError
from utils.config import ExperimentConfig, env_overrides, load_config


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_defaults_build_the_service_configs():
    config = load_config(None, environ={})
    assert config.num_prototypes == 10
    assert config.train_config().levels == 20
    assert config.em_config().ema_tau == 0.99
    assert config.synthetic_spec().num_classes == 3


def test_file_values_and_explicit_overrides(tmp_path):
    path = _write(tmp_path / 'run.json', {'seed': 4, 'epochs': 2, 'part_strengths': [1.0, 0.5]})
    config = load_config(path, overrides={'seed': 9, 'out': None}, environ={})
    assert config.seed == 9
    assert config.epochs == 2
    assert config.out == 'runs/default'
    assert config.synthetic_spec().part_strengths == (1.0, 0.5)


def test_environment_overrides_file(tmp_path):
    path = _write(tmp_path / 'run.json', {'threads': 1})
    config = load_config(path, environ={'MGPROTO_THREADS': '3', 'MGPROTO_DIVERSITY_ENABLED': 'false'})
    assert config.threads == 3
    assert config.diversity_enabled is False
    assert env_overrides({'UNRELATED': '1'}) == {}


def test_unknown_key_is_rejected(tmp_path):
    path = _write(tmp_path / 'run.json', {'epochz': 3})
    with pytest.raises(ConfigError, match='epochz'):
        load_config(path, environ={})


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match='nowhere.json'):
        load_config(tmp_path / 'nowhere.json', environ={})


def test_invalid_json(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text('{"seed": ')
    with pytest.raises(ConfigError, match='not valid JSON'):
        load_config(path, environ={})


@pytest.mark.parametrize('data', [
    {'levels': 26},
    {'memory_capacity': 5, 'num_prototypes': 6},
    {'warmup_margin': 0.0},
    {'part_strengths': [1.0]},
    {'ema_tau': 1.0},
])
def test_cross_field_validation(data):
    with pytest.raises(ValueError):
        ExperimentConfig(**data)


def test_config_is_frozen():
    config = ExperimentConfig()
    with pytest.raises(ValueError):
        config.seed = 3
