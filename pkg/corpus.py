import json
import logging
import random
import re
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, ClassVar, Literal, Mapping, Optional, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    PlainValidator,
    TypeAdapter,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_core import PydanticCustomError

from utilities import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

ANSWER_MARKER = "#### "
NUMERIC_LITERAL = re.compile(r"[-+]?(?:\d[\d,]*)?\.?\d+")
LANGUAGE_CODE = re.compile(r"[a-z][a-z0-9_-]*")


def to_fraction(value: Any) -> Fraction:
    """Coerce "1/3", 3, 0.5 or a Fraction into a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError("booleans are not ratios")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**6)
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"not a rational number: {value!r}") from e
    raise ValueError(f"not a rational number: {value!r}")


Ratio = Annotated[
    Fraction,
    PlainValidator(to_fraction),
    PlainSerializer(str, return_type=str),
]


class DatasetError(ValueError):
    """A dataset file or record could not be parsed."""

    def __init__(
        self,
        message: str,
        line_number: Optional[int] = None,
        sample_id: Optional[str] = None,
    ):
        super().__init__(message)
        self.line_number = line_number
        self.sample_id = sample_id


class SpanMismatchError(DatasetError):
    """A QA answer does not sit at its declared offset in the context."""


class TaskKind(str, Enum):
    MATH = "math"
    QA = "qa"
    NLI = "nli"


class NLILabel(str, Enum):
    ENTAILMENT = "entailment"
    NEUTRAL = "neutral"
    CONTRADICTION = "contradiction"


class DatasetRole(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    CODE_SWITCHED = "code_switched"
    MIXED = "mixed"


class LanguageTag(BaseModel):
    """Language metadata used in prompts and length normalization"""

    model_config = ConfigDict(frozen=True)

    code: str = Field(..., description="Short language code rendered in prompts")
    display_name: str = Field(..., description="Name used in answer-language instructions")
    char_weight: Ratio = Field(Fraction(1), description="Length-normalization factor per character")
    sentence_separator: str = Field(" ", description="Joiner for translated sentences")

    @field_validator("code")
    @classmethod
    def check_code(cls, code: str) -> str:
        if not LANGUAGE_CODE.fullmatch(code):
            raise ValueError(f"language code must be lowercase ASCII letters, digits, '_' or '-', got {code!r}")
        return code

    @field_validator("char_weight")
    @classmethod
    def check_weight(cls, weight: Fraction) -> Fraction:
        if weight <= 0:
            raise ValueError("char_weight must be positive")
        return weight


KNOWN_LANGUAGES: dict[str, LanguageTag] = {
    "en": LanguageTag(code="en", display_name="English"),
    "de": LanguageTag(code="de", display_name="German"),
    "ru": LanguageTag(code="ru", display_name="Russian"),
    "th": LanguageTag(code="th", display_name="Thai"),
    "zh": LanguageTag(code="zh", display_name="Chinese", char_weight=3, sentence_separator=""),
}


def language_from_code(
    code: str, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None
) -> LanguageTag:
    """Resolve a language code against config overrides, then the built-in registry.

    Unknown codes get weight 1 and their code as display name.
    """
    overrides = overrides or {}
    if code in overrides:
        base = KNOWN_LANGUAGES[code].model_dump() if code in KNOWN_LANGUAGES else {}
        return LanguageTag.model_validate({**base, **overrides[code], "code": code})
    if code in KNOWN_LANGUAGES:
        return KNOWN_LANGUAGES[code]
    logger.warning(f"Unknown language '{code}', using character weight 1")
    return LanguageTag(code=code, display_name=code)


class SampleBase(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore", populate_by_name=True)

    id: str = Field(..., min_length=1, description="Sample id, unique within a dataset")
    origin: Optional[str] = Field(None, description="Provenance tag set by synthesis")
    input_lang: Optional[str] = Field(None, description="Language of the input fields")
    output_lang: Optional[str] = Field(None, description="Language of the output field")
    instruction: Optional[str] = Field(None, description="Answer-language instruction")

    # Keys of the JSON Lines schema, in output order
    record_fields: ClassVar[tuple[str, ...]] = ()
    metadata_fields: ClassVar[tuple[str, ...]] = ("origin", "input_lang", "output_lang", "instruction")

    def input_projection(self) -> dict[str, str]:
        raise NotImplementedError

    def output_projection(self) -> str:
        raise NotImplementedError

    def field_text(self, name: str) -> str:
        """Text of a schema field (e.g. "question", "answer", "context")."""
        record = self.to_record()
        if name not in self.record_fields or not isinstance(record.get(name), str):
            raise ValueError(f"Field '{name}' is not a text field of {self.kind.value} samples")
        return record[name]

    def with_fields(self, **updates: Any) -> "SampleBase":
        """Return a revalidated copy with schema fields replaced."""
        data = {**self.to_record(), **updates, "kind": self.kind}
        return type(self).model_validate(data)

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {"id": self.id}
        for name in self.record_fields:
            value = getattr(self, self.attribute_for(name))
            record[name] = value.value if isinstance(value, Enum) else value
        for name in self.metadata_fields:
            value = getattr(self, name)
            if value is not None:
                record[name] = value
        return record

    @classmethod
    def attribute_for(cls, record_field: str) -> str:
        return record_field


class MathSample(SampleBase):
    kind: Literal[TaskKind.MATH] = TaskKind.MATH
    question: str = Field(..., min_length=1)
    rationale: str = Field(..., alias="answer", min_length=1)
    final_answer: str = Field("", description="Numeric literal after the last '#### ' marker")

    record_fields: ClassVar[tuple[str, ...]] = ("question", "answer")

    @model_validator(mode="before")
    @classmethod
    def derive_final_answer(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("final_answer"):
            rationale = data.get("answer", data.get("rationale"))
            if isinstance(rationale, str) and ANSWER_MARKER in rationale:
                data = {**data, "final_answer": rationale.rsplit(ANSWER_MARKER, 1)[1].strip()}
        return data

    @model_validator(mode="after")
    def check_marker(self) -> "MathSample":
        if ANSWER_MARKER not in self.rationale:
            raise ValueError("rationale lacks the '#### ' answer marker line")
        tail = self.rationale.rsplit(ANSWER_MARKER, 1)[1]
        if tail.strip() != self.final_answer:
            raise ValueError(
                f"final_answer {self.final_answer!r} does not follow the last '#### ' marker"
            )
        if not NUMERIC_LITERAL.fullmatch(self.final_answer):
            raise ValueError(f"final_answer {self.final_answer!r} is not a numeric literal")
        return self

    @classmethod
    def attribute_for(cls, record_field: str) -> str:
        return "rationale" if record_field == "answer" else record_field

    def input_projection(self) -> dict[str, str]:
        return {"question": self.question}

    def output_projection(self) -> str:
        return self.rationale


class QASample(SampleBase):
    kind: Literal[TaskKind.QA] = TaskKind.QA
    context: str = Field(..., min_length=1)
    question: str = Field(..., min_length=1)
    answer_text: str = Field(..., min_length=1)
    answer_start: int = Field(..., description="Character offset of the answer in context")
    extractable: bool = Field(True, description="False when the answer is not a span of context")

    record_fields: ClassVar[tuple[str, ...]] = ("context", "question", "answer_text", "answer_start")

    @model_validator(mode="after")
    def check_span(self) -> "QASample":
        if not self.extractable:
            return self
        end = self.answer_start + len(self.answer_text)
        if self.answer_start < 0 or self.context[self.answer_start : end] != self.answer_text:
            raise PydanticCustomError(
                "span_mismatch",
                "answer_text does not occur in context at offset {answer_start}",
                {"answer_start": self.answer_start},
            )
        return self

    def to_record(self) -> dict[str, Any]:
        record = super().to_record()
        if not self.extractable:
            record["extractable"] = False
        return record

    def input_projection(self) -> dict[str, str]:
        return {"context": self.context, "question": self.question}

    def output_projection(self) -> str:
        return self.answer_text


class NLISample(SampleBase):
    kind: Literal[TaskKind.NLI] = TaskKind.NLI
    premise: str = Field(..., min_length=1)
    hypothesis: str = Field(..., min_length=1)
    label: NLILabel

    record_fields: ClassVar[tuple[str, ...]] = ("premise", "hypothesis", "label")

    @field_validator("label", mode="before")
    @classmethod
    def canonical_label(cls, label: Any) -> Any:
        return label.strip().lower() if isinstance(label, str) else label

    def input_projection(self) -> dict[str, str]:
        return {"premise": self.premise, "hypothesis": self.hypothesis}

    def output_projection(self) -> str:
        return self.label.value


Sample = Annotated[Union[MathSample, QASample, NLISample], Field(discriminator="kind")]
SAMPLE_ADAPTER: TypeAdapter[Sample] = TypeAdapter(Sample)
SAMPLE_TYPES: dict[TaskKind, type[SampleBase]] = {
    TaskKind.MATH: MathSample,
    TaskKind.QA: QASample,
    TaskKind.NLI: NLISample,
}


def describe_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "record"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def parse_sample(
    record: dict[str, Any],
    task: TaskKind,
    *,
    default_id: Optional[str] = None,
    line_number: Optional[int] = None,
) -> SampleBase:
    """Validate one JSON record as a sample of the given task.

    Integer ids are converted to strings; a missing id takes default_id.
    Schema violations raise DatasetError (SpanMismatchError for QA spans).
    """
    if not isinstance(record, dict):
        raise DatasetError("expected a JSON object", line_number=line_number)
    data = dict(record)
    if data.get("id") is None:
        data["id"] = default_id
    elif isinstance(data["id"], int) and not isinstance(data["id"], bool):
        data["id"] = str(data["id"])
    data["kind"] = task
    sample_id = data["id"] if isinstance(data["id"], str) else None
    where = f"line {line_number}" if line_number is not None else "record"
    try:
        return SAMPLE_TYPES[task].model_validate(data)
    except ValidationError as e:
        if any(item["type"] == "span_mismatch" for item in e.errors()):
            raise SpanMismatchError(
                f"{where}: sample '{sample_id}' answer span mismatch",
                line_number=line_number,
                sample_id=sample_id,
            ) from e
        raise DatasetError(
            f"{where}: invalid {task.value} sample ({describe_validation_error(e)})",
            line_number=line_number,
            sample_id=sample_id,
        ) from e


class Dataset(BaseModel):
    """An ordered, role-tagged collection of samples of one task"""

    model_config = ConfigDict(frozen=True)

    task: TaskKind
    language: LanguageTag
    role: DatasetRole = DatasetRole.SOURCE
    samples: tuple[Sample, ...] = ()
    notes: tuple[str, ...] = Field((), description="Provenance notes, e.g. 'translate-test'")

    @model_validator(mode="after")
    def check_samples(self) -> "Dataset":
        seen: set[str] = set()
        for sample in self.samples:
            if sample.kind != self.task:
                raise ValueError(
                    f"sample '{sample.id}' is a {sample.kind.value} sample in a {self.task.value} dataset"
                )
            if sample.id in seen:
                raise ValueError(f"duplicate sample id '{sample.id}'")
            seen.add(sample.id)
        return self

    @property
    def size(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [sample.id for sample in self.samples]

    def derive(self, samples, **changes: Any) -> "Dataset":
        """Build a new validated dataset sharing this one's task and language."""
        data = {
            "task": self.task,
            "language": self.language,
            "role": self.role,
            "notes": self.notes,
            **changes,
            "samples": tuple(samples),
        }
        return Dataset(**data)


class ParallelPair(BaseModel):
    """A source sample and its translation, sharing one id"""

    model_config = ConfigDict(frozen=True)

    src: Sample
    tgt: Sample
    src_lang: LanguageTag
    tgt_lang: LanguageTag

    @model_validator(mode="after")
    def check_alignment(self) -> "ParallelPair":
        if self.src.id != self.tgt.id:
            raise ValueError(f"pair ids differ: '{self.src.id}' vs '{self.tgt.id}'")
        if self.src.kind != self.tgt.kind:
            raise ValueError(f"pair '{self.src.id}' mixes task kinds")
        if self.src_lang.code == self.tgt_lang.code:
            raise ValueError(f"pair '{self.src.id}' has the same language on both sides")
        return self

    @property
    def id(self) -> str:
        return self.src.id

    @property
    def task(self) -> TaskKind:
        return self.src.kind

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "src_lang": self.src_lang.code,
            "tgt_lang": self.tgt_lang.code,
            "src": self.src.to_record(),
            "tgt": self.tgt.to_record(),
        }


def read_dataset(
    path: str | Path,
    task: TaskKind,
    language: LanguageTag,
    role: DatasetRole = DatasetRole.SOURCE,
) -> Dataset:
    """Read a JSON Lines dataset.

    Args:
        path: JSON Lines file, one sample per line
        task: Task schema the records must match
        language: Language of the samples
        role: Role tag of the returned dataset

    Returns:
        Dataset: Samples in file order; missing ids become the line number
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    samples = []
    seen: dict[str, int] = {}
    for line_number, line in iter_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(
                f"{path}:{line_number}: malformed JSON line ({e.msg})", line_number=line_number
            ) from e
        sample = parse_sample(record, task, default_id=str(line_number), line_number=line_number)
        if sample.id in seen:
            raise DatasetError(
                f"{path}:{line_number}: duplicate id '{sample.id}' (first seen on line {seen[sample.id]})",
                line_number=line_number,
                sample_id=sample.id,
            )
        seen[sample.id] = line_number
        samples.append(sample)
    logger.debug(f"Read {len(samples)} {task.value} samples from {path}")
    return Dataset(task=task, language=language, role=role, samples=tuple(samples))


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"Output directory does not exist: {path.parent}")
    write_jsonl(path, (sample.to_record() for sample in dataset.samples))


def take_subset(dataset: Dataset, n: int, seed: int, head: bool = False) -> Dataset:
    """Select n samples without replacement, keeping the original order.

    With head=True the first n samples are taken instead of a seeded draw.
    """
    if n < 0:
        raise ValueError(f"subset size must be non-negative, got {n}")
    if n >= dataset.size:
        return dataset
    if head:
        indices = range(n)
    else:
        indices = sorted(random.Random(seed).sample(range(dataset.size), n))
    return dataset.derive(dataset.samples[i] for i in indices)


def read_parallel(
    src_path: str | Path,
    tgt_path: str | Path,
    task: TaskKind,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
) -> list[ParallelPair]:
    """Pair two aligned dataset files by id, in source order."""
    src = read_dataset(src_path, task, src_lang)
    tgt = read_dataset(tgt_path, task, tgt_lang, role=DatasetRole.TARGET)
    by_id = {sample.id: sample for sample in tgt.samples}
    missing = [sample.id for sample in src.samples if sample.id not in by_id]
    if missing or len(by_id) != src.size:
        raise DatasetError(
            f"{src_path} and {tgt_path} are not aligned by id"
            + (f" (missing in target: {', '.join(missing[:5])})" if missing else "")
        )
    return [
        ParallelPair(src=sample, tgt=by_id[sample.id], src_lang=src_lang, tgt_lang=tgt_lang)
        for sample in src.samples
    ]


def pair_from_record(
    record: dict[str, Any],
    task: TaskKind,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
    line_number: Optional[int] = None,
) -> ParallelPair:
    if record.get("src_lang") != src_lang.code or record.get("tgt_lang") != tgt_lang.code:
        raise DatasetError(
            f"pair languages {record.get('src_lang')}->{record.get('tgt_lang')} "
            f"do not match {src_lang.code}->{tgt_lang.code}",
            line_number=line_number,
            sample_id=record.get("id"),
        )
    return ParallelPair(
        src=parse_sample(record["src"], task, line_number=line_number),
        tgt=parse_sample(record["tgt"], task, line_number=line_number),
        src_lang=src_lang,
        tgt_lang=tgt_lang,
    )
