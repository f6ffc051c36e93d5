import json

import pytest

from sep_pipeline.config import ConfigError, config_hash, section_hash, validate_config
from conftest import TINY_CONFIG


def test_defaults_applied(tmp_path):
    cfg = validate_config({"output_dir": "out", "seed": 1}, base_dir=tmp_path)
    assert cfg["regression"]["k_folds"] == 10
    assert cfg["regression"]["n_iter"] == 50
    assert cfg["split"] == {"n_train": 800, "n_test": 175}
    assert cfg["extractor"]["feature_dim"] == 30
    assert cfg["output_dir"] == str((tmp_path / "out").resolve())


def test_negative_seed_single_error(tmp_path):
    with pytest.raises(ConfigError) as e:
        validate_config({"output_dir": "o", "seed": -3}, base_dir=tmp_path)
    assert len(e.value.errors) == 1 and "seed" in e.value.errors[0]


def test_all_independent_errors_reported(tmp_path):
    bad = {"output_dir": "o", "seed": 1, "split": {"n_train": 0},
           "extractor": {"lr": -1.0}, "regression": {"k_folds": 1}}
    with pytest.raises(ConfigError) as e:
        validate_config(bad, base_dir=tmp_path)
    text = "\n".join(e.value.errors)
    assert len(e.value.errors) == 3
    for key in ("split.n_train", "extractor.lr", "regression.k_folds"):
        assert key in text


def test_unknown_and_mistyped_keys(tmp_path):
    for bad in ({"output_dir": "o", "seed": 1, "colour": 3},
                {"output_dir": "o", "seed": 1, "extractor": {"epochs": "ten"}},
                {"output_dir": "o", "seed": 1, "regression": {"algorithms": ["svm"]}},
                {"seed": 1}):
        with pytest.raises(ConfigError):
            validate_config(bad, base_dir=tmp_path)


def test_cross_checks(tmp_path):
    with pytest.raises(ConfigError, match="exceeds"):
        validate_config({"output_dir": "o", "seed": 1, "split": {"n_train": 900, "n_test": 175}}, base_dir=tmp_path)
    with pytest.raises(ConfigError, match="p_low"):
        validate_config({"output_dir": "o", "seed": 1, "preprocess": {"p_low": 50, "p_high": 40}}, base_dir=tmp_path)
    with pytest.raises(ConfigError, match="survey_csv"):
        validate_config({"output_dir": "o", "seed": 1, "cohort": {"source": "files"}}, base_dir=tmp_path)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        validate_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        validate_config(tmp_path / "bad.json")


def test_hash_ignores_output_location(tmp_path):
    a = validate_config(dict(TINY_CONFIG), base_dir=tmp_path / "a")
    b = validate_config(dict(TINY_CONFIG, output_dir="elsewhere"), base_dir=tmp_path)
    assert config_hash(a) == config_hash(b)
    c = validate_config(dict(TINY_CONFIG, seed=8), base_dir=tmp_path)
    assert config_hash(c) != config_hash(a)
    assert section_hash(a, "split") == section_hash(c, "split")


def test_shipped_configs_validate():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.json")):
        cfg = validate_config(path)
        assert json.loads(json.dumps(cfg)) == cfg
