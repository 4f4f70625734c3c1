import json

import pytest

from malsmooth.config import CliConfig, config_from_dict, dump_config, load_config, with_overrides
from malsmooth.errors import ConfigError
from malsmooth.model import PRESETS, TRAINING_PRESETS


def write(tmp_path, data):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return p


def test_minimal_config_gets_desk_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"corpus": {"path": "corpus"}}))
    assert cfg.model.model_config() == PRESETS["desk"]
    assert cfg.model.training_config() == TRAINING_PRESETS["desk"]
    assert cfg.window_size == 512
    assert cfg.corpus.path == str((tmp_path / "corpus").resolve())


def test_indivisible_window_names_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, {"model": {"input_length": 100}, "smoothing": {"window_size": 30}}))
    assert info.value.key == "smoothing.window_size"


@pytest.mark.parametrize(
    "data, key",
    [
        ({"model": {"filters": 3}}, "model.filters"),
        ({"bogus": 1}, "bogus"),
        ({"attack": {"epsilon": 0}}, "attack.epsilon"),
        ({"model": {"preset": "huge"}}, "model.preset"),
        ({"model": {"conv_stride": 7}}, "model.conv_stride"),
        ({"corpus": {"synthetic": {"nope": 1}}}, "corpus.synthetic"),
        ({"corpus": "x"}, "corpus"),
    ],
)
def test_validation_errors_name_the_key(tmp_path, data, key):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, data))
    assert info.value.key == key


def test_parse_error_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="parse"):
        load_config(write(tmp_path, "{not json"))


def test_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 4, "smoothing": {"window_size": 1024, "patch_sizes": [10, 20]}}))
    again = config_from_dict(json.loads(dump_config(cfg)))
    assert again == cfg


def test_flags_override_file(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 1, "attack": {"epsilon": 0.25}}))
    cfg = with_overrides(cfg, seed=9, attack={"epsilon": 0.75, "iterations": None})
    assert cfg.seed == 9 and cfg.attack.epsilon == 0.75 and cfg.attack.iterations == 10


def test_deterministic_forces_single_worker():
    assert with_overrides(CliConfig(), jobs=4, deterministic=True).effective_jobs == 1
    assert with_overrides(CliConfig(), jobs=3).effective_jobs == 3
