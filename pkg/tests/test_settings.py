"""Unit tests for settings.py module."""

import json
from fractions import Fraction
from pathlib import Path

import pytest

from corpus import TaskKind
from settings import ConfigError, PipelineConfig, load_config, save_config


def write_config(pipeline_files, **changes):
    data = {**pipeline_files["raw"], **changes}
    pipeline_files["config"].write_text(json.dumps(data), encoding="utf-8")
    return pipeline_files["config"]


class TestLoadConfig:
    """Tests for reading pipeline configs."""

    def test_load(self, pipeline_files):
        """Test defaults and path resolution against the config directory."""
        config = load_config(pipeline_files["config"])
        root = pipeline_files["root"]
        assert config.task == TaskKind.QA
        assert config.input_path == root / "data" / "train_en.jsonl"
        assert config.fewshot.tgt_path == root / "data" / "seeds_de.jsonl"
        assert config.output_dir == root / "out"
        assert config.filter.min_ratio == Fraction(1, 3)
        assert config.backend.max_in_flight == 4
        assert config.target_language().display_name == "German"

    def test_missing_file(self, tmp_path):
        """Test that a missing config is reported."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.json")

    def test_malformed(self, tmp_path):
        """Test malformed JSON and non-object documents."""
        path = tmp_path / "config.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(path)
        path.write_text("[]", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON object"):
            load_config(path)

    def test_invalid_values(self, pipeline_files):
        """Test that schema errors name the config file."""
        path = write_config(pipeline_files, task="summarization")
        with pytest.raises(ConfigError, match="config.json"):
            load_config(path)
        write_config(pipeline_files, tgt_lang="en")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_inputs(self, pipeline_files):
        """Test that input files must exist."""
        path = write_config(pipeline_files, input_path="data/none.jsonl")
        with pytest.raises(ConfigError, match="input_path"):
            load_config(path)

    def test_missing_mock_script(self, pipeline_files):
        """Test that a named mock script must exist."""
        path = write_config(pipeline_files, backend={"kind": "mock", "mock_script": "script.jsonl"})
        with pytest.raises(ConfigError, match="mock_script"):
            load_config(path)

    def test_overrides(self, pipeline_files):
        """Test that the seed override reaches every seed."""
        config = load_config(pipeline_files["config"], {"seed": 5, "in_flight": 1, "output_dir": "elsewhere"})
        assert (config.shuffle_seed, config.fewshot.seed, config.subset.seed) == (5, 5, 5)
        assert config.backend.max_in_flight == 1
        assert config.output_dir == Path("elsewhere")

    def test_bad_override(self, pipeline_files):
        """Test that invalid overrides are config errors."""
        with pytest.raises(ConfigError):
            load_config(pipeline_files["config"], {"in_flight": 0})


class TestPipelineConfig:
    """Tests for config helpers."""

    def test_language_overrides(self, pipeline_files):
        """Test that configured weights reach the filter."""
        path = write_config(pipeline_files, languages={"de": {"char_weight": "3/2"}})
        config = load_config(path)
        assert config.target_language().char_weight == Fraction(3, 2)
        assert config.filter_config().weight_map["de"] == Fraction(3, 2)
        assert config.filter_config().weight_map["zh"] == 3

    def test_save_round_trip(self, pipeline_files, tmp_path):
        """Test that a saved config loads back unchanged."""
        config = load_config(pipeline_files["config"])
        path = tmp_path / "saved.json"
        save_config(config, path)
        saved = json.loads(path.read_text(encoding="utf-8"))
        assert saved["filter"]["min_ratio"] == "1/3"
        assert PipelineConfig.model_validate(saved) == config
