import json
import logging
import random
import re
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from corpus import LANGUAGE_CODE, LanguageTag, ParallelPair, SampleBase, TaskKind, language_from_code
from utilities import RunManifest, sha256_text

logger = logging.getLogger(__name__)

BACKTICK = "`"
# Last line of a rendered prompt: a language tag and the opening backtick of the target slot
OPEN_SLOT = re.compile(rf"(?:^|\n){LANGUAGE_CODE.pattern}: `\Z")
DEFAULT_SHOTS = 8

BacktickPolicy = Literal["reject", "escape"]


class PromptError(ValueError):
    """A prompt could not be rendered from the given inputs."""


class DelimiterCollisionError(PromptError):
    """Text contains the backtick that delimits prompt slots."""


class FewShotBank(BaseModel):
    """Aligned source/target texts of one field, rendered as in-context examples"""

    model_config = ConfigDict(frozen=True)

    task: TaskKind
    field_name: str = Field(..., description="Schema field the pairs were taken from")
    pairs: tuple[tuple[str, str], ...] = Field(..., min_length=1)
    src_lang: LanguageTag
    tgt_lang: LanguageTag

    @field_validator("pairs")
    @classmethod
    def check_pairs(cls, pairs: tuple[tuple[str, str], ...]) -> tuple[tuple[str, str], ...]:
        for index, pair in enumerate(pairs):
            for text in pair:
                if not text.strip():
                    raise ValueError(f"few-shot pair {index} has an empty side")
                if BACKTICK in text:
                    raise ValueError(f"few-shot pair {index} contains a backtick")
        return pairs

    @model_validator(mode="after")
    def check_languages(self) -> "FewShotBank":
        if self.src_lang.code == self.tgt_lang.code:
            raise ValueError("few-shot bank needs two different languages")
        return self

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "field_name": self.field_name,
            "src_lang": self.src_lang.code,
            "tgt_lang": self.tgt_lang.code,
            "pairs": [list(pair) for pair in self.pairs],
        }


def load_bank(
    path: str | Path, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None
) -> FewShotBank:
    """Load a bank saved with FewShotBank.to_json."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Few-shot bank not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    return FewShotBank(
        task=TaskKind(data["task"]),
        field_name=data["field_name"],
        pairs=tuple(tuple(pair) for pair in data["pairs"]),
        src_lang=language_from_code(data["src_lang"], overrides),
        tgt_lang=language_from_code(data["tgt_lang"], overrides),
    )


class RenderedPrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    stop_sequence: Literal["`"] = BACKTICK

    @field_validator("text")
    @classmethod
    def ends_with_open_slot(cls, text: str) -> str:
        if not OPEN_SLOT.search(text):
            raise ValueError("prompt must end with the opening backtick of the target slot")
        return text

    @property
    def sha256(self) -> str:
        return sha256_text(self.text)


def guard_delimiter(text: str, policy: BacktickPolicy = "reject") -> str:
    """Apply the backtick policy to text placed inside a prompt slot."""
    if BACKTICK not in text:
        return text
    if policy == "escape":
        return text.replace(BACKTICK, "'")
    raise DelimiterCollisionError(f"text contains a raw backtick: {text[:60]!r}")


def build_translation_prompt(
    bank: FewShotBank, source_text: str, backtick_policy: BacktickPolicy = "reject"
) -> RenderedPrompt:
    """Render the few-shot completion prompt for one source text.

    Each example pair becomes a block of two tagged lines followed by a blank
    line; the prompt closes with the tagged source line and an open target
    slot, so the model's closing backtick marks the end of the translation.

    Args:
        bank: Example pairs and the language pair
        source_text: Text to translate
        backtick_policy: "reject" raises on a raw backtick, "escape" replaces it with "'"

    Returns:
        RenderedPrompt: Prompt text plus the backtick stop sequence
    """
    if not source_text or not source_text.strip():
        raise PromptError("source text is empty")
    source_text = guard_delimiter(source_text, backtick_policy)

    src, tgt = bank.src_lang.code, bank.tgt_lang.code
    parts = [f"{src}: `{s}`\n{tgt}: `{t}`\n\n" for s, t in bank.pairs]
    parts.append(f"{src}: `{source_text}`\n{tgt}: `")
    return RenderedPrompt(text="".join(parts))


def render_code_switch_instruction(
    tgt: LanguageTag,
    table: Mapping[str, str],
    manifest: Optional[RunManifest] = None,
) -> str:
    """Instruction asking for an answer in tgt, looked up by language code."""
    if tgt.code in table:
        return table[tgt.code]
    if manifest is not None:
        manifest.warn(f"No answer-language instruction for '{tgt.code}', using the English fallback")
    return f"Please answer in {tgt.display_name}."


def sample_few_shots(
    parallel: list[ParallelPair],
    field_name: str,
    k: int = DEFAULT_SHOTS,
    seed: int = 0,
    text_of: Optional[Callable[[SampleBase], str]] = None,
) -> FewShotBank:
    """Draw k aligned example pairs of one field.

    Pairs whose text contains a backtick cannot be rendered and are skipped.
    text_of overrides how a sample is reduced to example text; by default the
    named field is used as is.
    """
    if not parallel:
        raise PromptError("no parallel pairs to draw few-shot examples from")
    if k < 1:
        raise PromptError(f"few-shot count must be at least 1, got {k}")

    def default_text(sample: SampleBase) -> str:
        return sample.field_text(field_name)

    extract = text_of or default_text
    first = parallel[0]
    try:
        extract(first.src)
    except ValueError as e:
        raise PromptError(str(e)) from e

    usable = []
    for pair in parallel:
        try:
            texts = (extract(pair.src), extract(pair.tgt))
        except ValueError as e:
            logger.debug(f"Skipping few-shot pair '{pair.id}' for field '{field_name}': {e}")
            continue
        if any(BACKTICK in text or not text.strip() for text in texts):
            logger.debug(f"Skipping few-shot pair '{pair.id}' for field '{field_name}'")
            continue
        usable.append(texts)
    if k > len(usable):
        raise PromptError(
            f"requested {k} few-shot pairs for '{field_name}' but only {len(usable)} are usable"
        )

    chosen = random.Random(seed).sample(usable, k)
    return FewShotBank(
        task=first.task,
        field_name=field_name,
        pairs=tuple(chosen),
        src_lang=first.src_lang,
        tgt_lang=first.tgt_lang,
    )
