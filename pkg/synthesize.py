import logging
import random
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from corpus import (
    Dataset,
    DatasetRole,
    LanguageTag,
    MathSample,
    NLISample,
    ParallelPair,
    QASample,
    SampleBase,
    TaskKind,
)
from prompting import render_code_switch_instruction
from utilities import RunManifest, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

NLI_QUESTION = "What is their logical relation? Entailment, Neutral or Contradition."


class Origin(str, Enum):
    SRC = "src"
    TGT = "tgt"
    CS_SRC_INPUT = "cs_src_input"
    CS_TGT_INPUT = "cs_tgt_input"
    FEWSHOT_SEED = "fewshot_seed"


CROSS_LINGUAL_ORIGINS = {Origin.CS_SRC_INPUT, Origin.CS_TGT_INPUT}

# Prefix of mixture ids per origin
ID_PREFIXES = {
    Origin.SRC: "src",
    Origin.TGT: "tgt",
    Origin.CS_SRC_INPUT: "cs",
    Origin.CS_TGT_INPUT: "cs",
    Origin.FEWSHOT_SEED: "seed",
}


class TrainingRecord(BaseModel):
    """One trainer-ready example; loss is computed on the output only"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    input_text: str = Field(..., alias="input", description="Rendered task prompt")
    output_text: str = Field(..., alias="output", min_length=1)
    loss_on_output_only: Literal[True] = True
    input_lang: str
    output_lang: str
    origin: Origin
    extractable: Optional[Literal[False]] = Field(
        None, description="Set to false for QA answers that are not spans of the context"
    )

    @model_validator(mode="after")
    def check_origin(self) -> "TrainingRecord":
        crossed = self.input_lang != self.output_lang
        if crossed != (self.origin in CROSS_LINGUAL_ORIGINS):
            raise ValueError(
                f"origin '{self.origin.value}' is inconsistent with "
                f"languages {self.input_lang}->{self.output_lang}"
            )
        return self

    @property
    def language_pair(self) -> tuple[str, str]:
        return self.input_lang, self.output_lang

    def to_record(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True, exclude_none=True)


def render_task_prompt(sample: SampleBase) -> str:
    """Render the task input, preceded by the answer-language instruction when set."""
    if isinstance(sample, MathSample):
        body = sample.question
    elif isinstance(sample, QASample):
        body = f"Context: {sample.context}\nQuestion: {sample.question}"
    elif isinstance(sample, NLISample):
        body = f"Premise: {sample.premise}\nHypothesis: {sample.hypothesis}\n{NLI_QUESTION}"
    else:
        raise TypeError(f"unsupported sample type {type(sample).__name__}")
    if sample.instruction:
        return f"{sample.instruction}\n{body}"
    return body


def render_task_output(sample: SampleBase) -> str:
    if isinstance(sample, NLISample):
        return sample.label.value.capitalize()
    return sample.output_projection()


def check_pairs(kept: list[ParallelPair]) -> None:
    if not kept:
        return
    first = kept[0]
    for pair in kept[1:]:
        if pair.task != first.task:
            raise ValueError(f"pair '{pair.id}' is a {pair.task.value} pair among {first.task.value} pairs")
        if (pair.src_lang.code, pair.tgt_lang.code) != (first.src_lang.code, first.tgt_lang.code):
            raise ValueError(
                f"pair '{pair.id}' translates {pair.src_lang.code}->{pair.tgt_lang.code}, "
                f"expected {first.src_lang.code}->{first.tgt_lang.code}"
            )


def build_target_dataset(
    kept: list[ParallelPair],
    *,
    task: Optional[TaskKind] = None,
    tgt_lang: Optional[LanguageTag] = None,
) -> Dataset:
    """Collect the translated side of the kept pairs as D_tgt.

    task and tgt_lang are only needed when kept is empty.
    """
    check_pairs(kept)
    if kept:
        task, tgt_lang = kept[0].task, kept[0].tgt_lang
    if task is None or tgt_lang is None:
        raise ValueError("task and tgt_lang are required to build an empty target dataset")
    samples = [
        pair.tgt.with_fields(origin=Origin.TGT.value, input_lang=tgt_lang.code, output_lang=tgt_lang.code)
        for pair in kept
    ]
    return Dataset(task=task, language=tgt_lang, role=DatasetRole.TARGET, samples=tuple(samples))


def cross_sample(
    input_side: SampleBase,
    output_side: SampleBase,
    sample_id: str,
    origin: Origin,
    input_lang: LanguageTag,
    output_lang: LanguageTag,
    instruction: Optional[str],
) -> SampleBase:
    """Pair the input fields of one sample with the output field of another."""
    data: dict[str, Any] = {
        **input_side.input_projection(),
        "id": sample_id,
        "kind": input_side.kind,
        "origin": origin.value,
        "input_lang": input_lang.code,
        "output_lang": output_lang.code,
        "instruction": instruction,
    }
    if isinstance(output_side, MathSample):
        data["answer"] = output_side.rationale
    elif isinstance(output_side, QASample):
        data.update(answer_text=output_side.answer_text, answer_start=-1, extractable=False)
    else:
        data["label"] = output_side.output_projection()
    return type(input_side).model_validate(data)


def build_code_switch(
    kept: list[ParallelPair],
    instruction_table: Mapping[str, str],
    *,
    task: Optional[TaskKind] = None,
    src_lang: Optional[LanguageTag] = None,
    tgt_lang: Optional[LanguageTag] = None,
    manifest: Optional[RunManifest] = None,
) -> Dataset:
    """Build D_cs: every kept pair yields (x_src, y_tgt) and (x_tgt, y_src).

    Math and QA inputs get an instruction naming the output language; NLI
    outputs are labels and get none. Code-switched QA answers are not spans of
    their context and are flagged non-extractable.
    """
    check_pairs(kept)
    if kept:
        task, src_lang, tgt_lang = kept[0].task, kept[0].src_lang, kept[0].tgt_lang
    if task is None or src_lang is None or tgt_lang is None:
        raise ValueError("task and languages are required to build an empty code-switched dataset")

    def instruction_for(lang: LanguageTag) -> Optional[str]:
        if task == TaskKind.NLI:
            return None
        return render_code_switch_instruction(lang, instruction_table, manifest)

    samples = []
    for pair in kept:
        samples.append(
            cross_sample(pair.src, pair.tgt, f"{pair.id}#cs-st", Origin.CS_SRC_INPUT,
                         src_lang, tgt_lang, instruction_for(tgt_lang))
        )
        samples.append(
            cross_sample(pair.tgt, pair.src, f"{pair.id}#cs-ts", Origin.CS_TGT_INPUT,
                         tgt_lang, src_lang, instruction_for(src_lang))
        )
    return Dataset(task=task, language=tgt_lang, role=DatasetRole.CODE_SWITCHED, samples=tuple(samples))


def tag_samples(
    samples: Iterable[SampleBase], default_origin: Origin, lang: LanguageTag
) -> list[SampleBase]:
    """Prefix ids with the origin and fill in missing provenance."""
    tagged = []
    for sample in samples:
        origin = Origin(sample.origin) if sample.origin else default_origin
        tagged.append(
            sample.with_fields(
                id=f"{ID_PREFIXES[origin]}:{sample.id}",
                origin=origin.value,
                input_lang=sample.input_lang or lang.code,
                output_lang=sample.output_lang or lang.code,
            )
        )
    return tagged


def assemble_training_mix(
    d_src: Dataset,
    d_tgt: Optional[Dataset] = None,
    d_cs: Optional[Dataset] = None,
    fewshot_seed_samples: Iterable[SampleBase] = (),
    shuffle_seed: int = 0,
    *,
    include_src: bool = True,
    seed_lang: Optional[LanguageTag] = None,
    manifest: Optional[RunManifest] = None,
    name: str = "mix",
) -> Dataset:
    """Concatenate the requested components with the few-shot seed samples and shuffle.

    Args:
        d_src: Source-language training data; also fixes task and mix language
        d_tgt: Translated data, if the arm uses it
        d_cs: Code-switched data, if the arm uses it
        fewshot_seed_samples: Target-language samples every arm receives
        shuffle_seed: Seed of the deterministic shuffle
        include_src: False builds the synthetic-data-only arm
        seed_lang: Language of the seed samples (defaults to d_tgt's language)
        manifest: Receives the component counts under mixes[name]

    Returns:
        Dataset: role "mixed", ids prefixed with their origin
    """
    seeds = list(fewshot_seed_samples)
    for component in (d_tgt, d_cs):
        if component is not None and component.task != d_src.task:
            raise ValueError(
                f"cannot mix a {component.task.value} component into a {d_src.task.value} mixture"
            )
    for seed in seeds:
        if seed.kind != d_src.task:
            raise ValueError(f"seed sample '{seed.id}' is not a {d_src.task.value} sample")
    if seeds and seed_lang is None:
        if d_tgt is None:
            raise ValueError("seed_lang is required when no target dataset is given")
        seed_lang = d_tgt.language

    counts: dict[str, int] = {}
    samples: list[SampleBase] = []
    if include_src:
        samples += tag_samples(d_src.samples, Origin.SRC, d_src.language)
        counts["src"] = d_src.size
    if d_tgt is not None:
        samples += tag_samples(d_tgt.samples, Origin.TGT, d_tgt.language)
        counts["tgt"] = d_tgt.size
    if d_cs is not None:
        samples += tag_samples(d_cs.samples, Origin.CS_SRC_INPUT, d_cs.language)
        counts["cs"] = d_cs.size
    samples += tag_samples(seeds, Origin.FEWSHOT_SEED, seed_lang) if seeds else []
    counts["fewshot_seed"] = len(seeds)

    random.Random(shuffle_seed).shuffle(samples)
    mix = Dataset(task=d_src.task, language=d_src.language, role=DatasetRole.MIXED, samples=tuple(samples))
    counts["total"] = mix.size
    if manifest is not None:
        manifest.mixes[name] = counts
    logger.debug(f"Assembled {name}: {counts}")
    return mix


def training_record(sample: SampleBase, default_lang: LanguageTag) -> TrainingRecord:
    origin = Origin(sample.origin) if sample.origin else Origin.SRC
    return TrainingRecord(
        input_text=render_task_prompt(sample),
        output_text=render_task_output(sample),
        input_lang=sample.input_lang or default_lang.code,
        output_lang=sample.output_lang or default_lang.code,
        origin=origin,
        extractable=False if isinstance(sample, QASample) and not sample.extractable else None,
    )


def export_training_records(dataset: Dataset, path: str | Path) -> int:
    """Write the dataset as TrainingRecord JSON Lines in dataset order."""
    return write_jsonl(path, (training_record(s, dataset.language).to_record() for s in dataset.samples))


def read_training_records(path: str | Path) -> list[TrainingRecord]:
    return [TrainingRecord.model_validate(record) for record in read_jsonl(path)]
