import json

from components.moea_core import OptimizerConfig
from components.objective_model import default_protocol, protocol_to_dict, validate_protocol
from utils import config_utils


def _write(path, data) -> str:
    path.write_text(json.dumps(data))
    return str(path)


def test_get_config_failures_return_none(tmp_path):
    assert config_utils.get_config("") is None
    assert config_utils.get_config(str(tmp_path / "missing.json")) is None
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert config_utils.get_config(str(broken)) is None
    assert config_utils.get_config(_write(tmp_path / "list.json", [1, 2])) is None


def test_bundled_protocol_is_the_default():
    protocol = config_utils.load_protocol()
    assert protocol_to_dict(protocol) == protocol_to_dict(default_protocol())
    validate_protocol(protocol)


def test_invalid_protocol_file(tmp_path):
    raw = protocol_to_dict(default_protocol())
    raw["aims"][3]["priority"] = 0
    assert config_utils.load_protocol(_write(tmp_path / "protocol.json", raw)) is None


def test_bundled_optimizer_settings():
    settings = config_utils.load_optimizer_settings()
    assert settings.optimizer == OptimizerConfig()
    assert (settings.adaptive.n_dc_min, settings.adaptive.n_dc_max, settings.adaptive.n_dc_reeval) == (2500, 20000, 50000)
    assert settings.constraints.cr_single == 0.2


def test_partial_and_invalid_settings(tmp_path):
    partial = config_utils.load_optimizer_settings(_write(tmp_path / "partial.json", {"optimizer": {"population_size": 24}}))
    assert partial.optimizer.population_size == 24
    assert partial.adaptive.min_steps == 4
    assert config_utils.load_optimizer_settings(_write(tmp_path / "unknown.json", {"optimizer": {"pop": 24}})) is None
    assert config_utils.load_optimizer_settings(_write(tmp_path / "bad.json", {"adaptive": {"min_steps": 0}})) is None


def test_phantom_presets(phantom_presets, tmp_path):
    assert {"easy", "medium"} <= set(phantom_presets)
    assert phantom_presets["easy"].needle_count == 0
    assert phantom_presets["medium"].needle_count == 6
    assert config_utils.load_phantom_presets(_write(tmp_path / "presets.json", {"bad": {"name": "bad"}})) is None
