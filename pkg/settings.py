import json
import logging
from pathlib import Path
from typing import Any, Mapping, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from corpus import LanguageTag, TaskKind, describe_validation_error, language_from_code
from filters import FilterConfig
from gateway import BackendConfig
from prompting import DEFAULT_SHOTS, BacktickPolicy
from utilities import write_json

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """The pipeline configuration is invalid or references missing files."""


class FewShotConfig(BaseModel):
    """Aligned files the few-shot examples and seed samples are drawn from"""

    src_path: Path = Field(..., description="Source-language seed samples (JSON Lines)")
    tgt_path: Path = Field(..., description="Target-language seed samples aligned by id")
    k: int = Field(DEFAULT_SHOTS, ge=1, description="Examples per field")
    seed: int = Field(0, description="Seed of the example draw")


class SubsetConfig(BaseModel):
    n: Optional[int] = Field(None, ge=0, description="Subset size; None keeps every sample")
    seed: int = 0
    head: bool = Field(False, description="Take the first n samples instead of a seeded draw")


class PipelineConfig(BaseModel):
    """One run of the translate, filter and synthesize pipeline"""

    task: TaskKind
    src_lang: str = Field("en", description="Source language code")
    tgt_lang: str = Field(..., description="Target language code")
    languages: dict[str, dict[str, Any]] = Field(
        default_factory=dict, description="Overrides of the built-in language registry by code"
    )
    input_path: Path = Field(..., description="Source training data (JSON Lines)")
    test_input_path: Optional[Path] = Field(None, description="Evaluation inputs for translate-test")
    backend: BackendConfig = Field(default_factory=BackendConfig)
    budgets: dict[str, int] = Field(default_factory=dict, description="max_new_tokens per field name")
    filter: FilterConfig = Field(default_factory=FilterConfig)
    fewshot: FewShotConfig
    instruction_table: dict[str, str] = Field(
        default_factory=dict, description="Answer-language instruction per language code"
    )
    shuffle_seed: int = 0
    subset: SubsetConfig = Field(default_factory=SubsetConfig)
    output_dir: Path = Path("output")
    backtick_policy: BacktickPolicy = "reject"

    @model_validator(mode="after")
    def check_languages(self) -> "PipelineConfig":
        if self.src_lang == self.tgt_lang:
            raise ValueError("src_lang and tgt_lang must differ")
        return self

    def source_language(self) -> LanguageTag:
        return language_from_code(self.src_lang, self.languages)

    def target_language(self) -> LanguageTag:
        return language_from_code(self.tgt_lang, self.languages)

    def language(self, code: str) -> LanguageTag:
        return language_from_code(code, self.languages)

    def filter_config(self) -> FilterConfig:
        """Filter settings with weights of configured languages folded in."""
        weights = dict(self.filter.weight_map)
        for code in (self.src_lang, self.tgt_lang):
            if code in self.languages and "char_weight" in self.languages[code]:
                weights[code] = self.language(code).char_weight
        return self.filter.model_copy(update={"weight_map": weights})

    def with_overrides(
        self,
        seed: Optional[int] = None,
        in_flight: Optional[int] = None,
        output_dir: Optional[str | Path] = None,
    ) -> "PipelineConfig":
        """Apply command-line overrides; --seed sets every seed of the run."""
        data = self.model_dump()
        if seed is not None:
            data["subset"]["seed"] = seed
            data["fewshot"]["seed"] = seed
            data["shuffle_seed"] = seed
        if in_flight is not None:
            data["backend"]["max_in_flight"] = in_flight
        if output_dir is not None:
            data["output_dir"] = Path(output_dir)
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid override: {describe_validation_error(e)}") from e


PATH_KEYS = (
    ("input_path",),
    ("test_input_path",),
    ("output_dir",),
    ("fewshot", "src_path"),
    ("fewshot", "tgt_path"),
    ("backend", "mock_script"),
)
# Inputs that must exist when the config is loaded
REQUIRED_INPUTS = (("input_path",), ("fewshot", "src_path"), ("fewshot", "tgt_path"))


def resolve_paths(data: dict[str, Any], base: Path) -> dict[str, Any]:
    """Resolve relative paths in a raw config against the config's directory."""
    for keys in PATH_KEYS:
        parent = data
        for key in keys[:-1]:
            parent = parent.get(key) if isinstance(parent, dict) else None
        if not isinstance(parent, dict) or parent.get(keys[-1]) is None:
            continue
        path = Path(parent[keys[-1]])
        parent[keys[-1]] = str(path if path.is_absolute() else base / path)
    return data


def load_config(path: str | Path, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """Load and validate a JSON pipeline configuration.

    Args:
        path: Config file; relative paths inside it are resolved against its directory
        overrides: Keyword arguments for PipelineConfig.with_overrides

    Returns:
        PipelineConfig: Validated configuration

    Raises:
        ConfigError: The file is missing, malformed, invalid, or names missing inputs
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e.msg}, line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")

    data = resolve_paths(data, path.parent)
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {describe_validation_error(e)}") from e

    for keys in REQUIRED_INPUTS:
        value: Any = config
        for key in keys:
            value = getattr(value, key)
        if not Path(value).exists():
            raise ConfigError(f"{path}: {'.'.join(keys)} does not exist: {value}")
    if config.backend.mock_script is not None and not config.backend.mock_script.exists():
        raise ConfigError(f"{path}: backend.mock_script does not exist: {config.backend.mock_script}")

    if overrides:
        config = config.with_overrides(**overrides)
    logger.debug(f"Loaded config {path} for {config.task.value} {config.src_lang}->{config.tgt_lang}")
    return config


def save_config(config: PipelineConfig, path: str | Path) -> None:
    """Write the resolved config next to the run outputs."""
    write_json(path, config.model_dump(mode="json"))
