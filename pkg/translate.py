import json
import logging
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field

from corpus import (
    ANSWER_MARKER,
    Dataset,
    DatasetError,
    DatasetRole,
    LanguageTag,
    MathSample,
    ParallelPair,
    QASample,
    Sample,
    SampleBase,
    TaskKind,
    parse_sample,
)
from gateway import Gateway, GenerationRequest, GenerationResponse
from prompting import (
    BACKTICK,
    DEFAULT_SHOTS,
    BacktickPolicy,
    DelimiterCollisionError,
    FewShotBank,
    RenderedPrompt,
    build_translation_prompt,
    sample_few_shots,
)
from utilities import ManifestEntry, RunManifest, iter_jsonl, sha256_text, write_jsonl

logger = logging.getLogger(__name__)

ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"

# Maximum new tokens per translated field
DEFAULT_BUDGETS: dict[TaskKind, dict[str, int]] = {
    TaskKind.QA: {"context": 512, "question": 256},
    TaskKind.NLI: {"premise": 256, "hypothesis": 256},
    TaskKind.MATH: {"question": 512, "answer": 512},
}
TRANSLATABLE_FIELDS: dict[TaskKind, tuple[str, ...]] = {
    task: tuple(fields) for task, fields in DEFAULT_BUDGETS.items()
}
INPUT_FIELDS: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.MATH: ("question",),
    TaskKind.QA: ("context", "question"),
    TaskKind.NLI: ("premise", "hypothesis"),
}

TERMINAL_PUNCTUATION = ".!?。！？"
FULLWIDTH_TERMINALS = "。！？"
TRAILING_CLOSERS = "\"')]}»”’」』"
LEADING_OPENERS = "\"'([{«“‘「『"
ABBREVIATIONS = frozenset(
    {
        "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "mt.", "ft.",
        "vs.", "etc.", "e.g.", "i.e.", "cf.", "al.", "approx.", "dept.", "est.",
        "u.s.", "u.k.", "u.n.", "inc.", "ltd.", "co.", "corp.", "no.", "vol.",
        "fig.", "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.",
        "sept.", "oct.", "nov.", "dec.", "gen.", "gov.", "sen.", "rep.", "rev.",
    }
)


class SpanExtractionError(ValueError):
    """The translated context does not carry a usable answer marking."""

    reason = "span_missing_tag"


class MissingTagError(SpanExtractionError):
    reason = "span_missing_tag"


class DuplicateTagError(SpanExtractionError):
    reason = "span_duplicate_tag"


class CrossedTagError(SpanExtractionError):
    reason = "span_crossed_tag"


class SpanMarkingError(ValueError):
    """An answer span cannot be marked in its context."""


class FieldBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    task: TaskKind
    field_name: str
    max_new_tokens: int = Field(..., ge=1)


def default_budgets(
    task: TaskKind, overrides: Optional[Mapping[str, int]] = None
) -> dict[str, FieldBudget]:
    """Per-field token budgets for a task, with optional overrides by field name."""
    limits = dict(DEFAULT_BUDGETS[task])
    for field_name, value in (overrides or {}).items():
        if field_name not in limits:
            raise ValueError(f"'{field_name}' is not a translatable {task.value} field")
        limits[field_name] = value
    return {
        name: FieldBudget(task=task, field_name=name, max_new_tokens=value)
        for name, value in limits.items()
    }


class TranslationOutcome(BaseModel):
    """Generated translation of one field, with the evidence the filter needs"""

    model_config = ConfigDict(frozen=True)

    sample_id: str
    field_name: str
    source_text: str
    generated_text: str = Field("", description="Generation without the closing backtick")
    terminated_by_stop: bool = False
    prompt_bytes: int = 0
    prompt_sha256: str = ""
    notes: tuple[str, ...] = ()

    def with_note(self, note: str) -> "TranslationOutcome":
        return self.model_copy(update={"notes": self.notes + (note,)})


class SpanMarking(BaseModel):
    model_config = ConfigDict(frozen=True)

    marked_text: str
    context: str
    answer_start: int
    answer_end: int


def mark_answer_span(context: str, answer_start: int, answer_len: int) -> SpanMarking:
    """Wrap context[answer_start:answer_start+answer_len] in answer tags."""
    if ANSWER_OPEN in context or ANSWER_CLOSE in context:
        raise SpanMarkingError("context already contains answer tags")
    end = answer_start + answer_len
    if answer_start < 0 or answer_len < 1 or end > len(context):
        raise SpanMarkingError(
            f"span [{answer_start}, {end}) is outside a context of length {len(context)}"
        )
    marked = (
        context[:answer_start]
        + ANSWER_OPEN
        + context[answer_start:end]
        + ANSWER_CLOSE
        + context[end:]
    )
    return SpanMarking(marked_text=marked, context=context, answer_start=answer_start, answer_end=end)


def extract_marked_span(translated: str) -> tuple[str, str, int]:
    """Remove the answer tags from a translation.

    Returns:
        tuple: (clean_text, span_text, new_start) with
        clean_text[new_start:new_start + len(span_text)] == span_text

    Raises:
        SpanExtractionError: Tags are duplicated, missing, crossed or enclose nothing
    """
    opens, closes = translated.count(ANSWER_OPEN), translated.count(ANSWER_CLOSE)
    if opens > 1 or closes > 1:
        raise DuplicateTagError(f"found {opens} open and {closes} close answer tags")
    if opens == 0 or closes == 0:
        raise MissingTagError("answer tag missing from translation")
    open_at = translated.index(ANSWER_OPEN)
    close_at = translated.index(ANSWER_CLOSE)
    if close_at < open_at:
        raise CrossedTagError("close tag precedes open tag")
    span_start = open_at + len(ANSWER_OPEN)
    span = translated[span_start:close_at]
    if not span:
        raise MissingTagError("answer tags enclose no text")
    clean = translated[:open_at] + span + translated[close_at + len(ANSWER_CLOSE) :]
    return clean, span, open_at


def strip_answer_tags(text: str) -> str:
    return text.replace(ANSWER_OPEN, "").replace(ANSWER_CLOSE, "")


def ends_sentence(token: str) -> bool:
    core = token
    while True:
        if core.endswith(ANSWER_CLOSE):
            core = core[: -len(ANSWER_CLOSE)]
        elif core and core[-1] in TRAILING_CLOSERS:
            core = core[:-1]
        else:
            break
    if not core or core[-1] not in TERMINAL_PUNCTUATION:
        return False
    word = core.replace(ANSWER_OPEN, "").lstrip(LEADING_OPENERS).lower()
    return word not in ABBREVIATIONS


def cut_after_fullwidth(token: str) -> list[str]:
    """Cut a whitespace token after each inner 。 ！ or ？ and the closers that follow it."""
    pieces: list[str] = []
    start = i = 0
    while i < len(token):
        if token[i] not in FULLWIDTH_TERMINALS:
            i += 1
            continue
        i += 1
        while i < len(token):
            if token.startswith(ANSWER_CLOSE, i):
                i += len(ANSWER_CLOSE)
            elif token[i] in TRAILING_CLOSERS:
                i += 1
            else:
                break
        if i < len(token):
            pieces.append(token[start:i])
            start = i
    pieces.append(token[start:])
    return pieces


def split_sentences(text: str) -> list[str]:
    """Split text into sentences at terminal punctuation.

    Segments are whitespace tokens rejoined with single spaces; a token ends a
    segment when it ends in . ! ? 。 ！ or ？ (after closing quotes, brackets or
    an answer close tag) and is not a known abbreviation. Unspaced text is also
    cut after every full-width terminal, so "你好。再见。" gives two segments; no
    space is added back at such a cut when the segments are rejoined.
    """
    segments: list[str] = []
    current: list[str] = []
    for token in text.split():
        *closed, rest = cut_after_fullwidth(token)
        for piece in closed:
            current.append(piece)
            segments.append(" ".join(current))
            current = []
        current.append(rest)
        if ends_sentence(rest):
            segments.append(" ".join(current))
            current = []
    if current:
        segments.append(" ".join(current))
    return segments


def merge_answer_segments(segments: list[str]) -> list[str]:
    """Join the segments from the answer open tag through the close tag into one."""
    first = next((i for i, s in enumerate(segments) if ANSWER_OPEN in s), None)
    last = next((i for i, s in enumerate(segments) if ANSWER_CLOSE in s), None)
    if first is None or last is None or last <= first:
        return segments
    return segments[:first] + [" ".join(segments[first : last + 1])] + segments[last + 1 :]


def answer_sentence(sample: QASample) -> str:
    """The sentence of a QA context holding the answer, with the answer marked."""
    marking = mark_answer_span(sample.context, sample.answer_start, len(sample.answer_text))
    segments = merge_answer_segments(split_sentences(marking.marked_text))
    return next(segment for segment in segments if ANSWER_OPEN in segment)


def build_field_banks(
    parallel: list[ParallelPair],
    task: TaskKind,
    k: int = DEFAULT_SHOTS,
    seed: int = 0,
    fields: Optional[tuple[str, ...]] = None,
) -> dict[str, FewShotBank]:
    """Draw one few-shot bank per translatable field.

    QA context examples are reduced to the marked answer sentence on both
    sides, matching how contexts are translated sentence by sentence.
    """
    banks = {}
    for field_name in fields or TRANSLATABLE_FIELDS[task]:
        text_of: Optional[Callable[[SampleBase], str]] = None
        if task == TaskKind.QA and field_name == "context":
            text_of = answer_sentence
        banks[field_name] = sample_few_shots(parallel, field_name, k=k, seed=seed, text_of=text_of)
    return banks


class FieldJob:
    """Prompts planned for one field of one sample."""

    def __init__(
        self,
        sample_id: str,
        field_name: str,
        source_text: str,
        notes: list[str],
        separator: str = " ",
    ):
        self.sample_id = sample_id
        self.field_name = field_name
        self.source_text = source_text
        self.notes = notes
        self.separator = separator
        self.prompts: list[RenderedPrompt] = []
        self.requests: list[GenerationRequest] = []

    def outcome(self, responses: list[GenerationResponse]) -> TranslationOutcome:
        notes = list(self.notes)
        for response in responses:
            if response.error_kind:
                notes.append(f"gateway_error:{response.error_kind}")
        if len(self.prompts) > 1:
            notes.append(f"segments:{len(self.prompts)}")
        return TranslationOutcome(
            sample_id=self.sample_id,
            field_name=self.field_name,
            source_text=self.source_text,
            generated_text=self.separator.join(r.text for r in responses),
            terminated_by_stop=bool(responses) and all(r.terminated_by_stop for r in responses),
            prompt_bytes=sum(len(p.text.encode("utf-8")) for p in self.prompts),
            prompt_sha256=sha256_text("\0".join(p.text for p in self.prompts)),
            notes=tuple(notes),
        )


def plan_field(
    sample_id: str,
    text: str,
    bank: FewShotBank,
    budget: FieldBudget,
    backtick_policy: BacktickPolicy = "reject",
    segments: Optional[list[str]] = None,
) -> FieldJob:
    notes = []
    if BACKTICK in text and backtick_policy == "escape":
        notes.append("backtick_escaped")
    job = FieldJob(sample_id, budget.field_name, text, notes, bank.tgt_lang.sentence_separator)
    try:
        job.prompts = [
            build_translation_prompt(bank, segment, backtick_policy)
            for segment in (segments if segments is not None else [text])
        ]
    except DelimiterCollisionError:
        job.notes.append("delimiter_collision")
        job.prompts = []
        return job
    job.requests = [
        GenerationRequest(
            prompt=prompt.text,
            max_new_tokens=budget.max_new_tokens,
            stop_sequences=(prompt.stop_sequence,),
        )
        for prompt in job.prompts
    ]
    return job


def plan_sample(
    sample: SampleBase,
    fields: tuple[str, ...],
    banks: Mapping[str, FewShotBank],
    budgets: Mapping[str, FieldBudget],
    backtick_policy: BacktickPolicy,
) -> list[FieldJob]:
    jobs = []
    for field_name in fields:
        if isinstance(sample, QASample) and field_name == "context":
            try:
                marking = mark_answer_span(
                    sample.context, sample.answer_start, len(sample.answer_text)
                )
            except SpanMarkingError:
                # the context already holds tag text, so no marking can be read back
                jobs.append(FieldJob(sample.id, field_name, sample.context, ["delimiter_collision"]))
                continue
            segments = merge_answer_segments(split_sentences(marking.marked_text))
            jobs.append(
                plan_field(
                    sample.id, marking.marked_text, banks[field_name], budgets[field_name],
                    backtick_policy, segments=segments,
                )
            )
        else:
            jobs.append(
                plan_field(
                    sample.id, sample.field_text(field_name), banks[field_name],
                    budgets[field_name], backtick_policy,
                )
            )
    return jobs


async def run_jobs(
    jobs: list[FieldJob],
    gateway: Gateway,
    on_progress: Optional[Callable[[int], None]] = None,
) -> list[TranslationOutcome]:
    """Send every planned request in one ordered batch and fold the replies back per field."""
    requests = [request for job in jobs for request in job.requests]
    responses = await gateway.generate_batch(requests, on_progress) if requests else []
    outcomes = []
    cursor = 0
    for job in jobs:
        outcomes.append(job.outcome(responses[cursor : cursor + len(job.requests)]))
        cursor += len(job.requests)
    return outcomes


def restitch_final_answer(rationale: str, final_answer: str) -> tuple[str, bool]:
    """Make the translated rationale end with "#### <final_answer>".

    Returns the rationale and whether it had to be repaired.
    """
    if ANSWER_MARKER in rationale:
        head, tail = rationale.rsplit(ANSWER_MARKER, 1)
        if tail.strip() == final_answer:
            return rationale, False
        return f"{head}{ANSWER_MARKER}{final_answer}", True
    return f"{rationale.rstrip()}\n{ANSWER_MARKER}{final_answer}", True


class TranslationCandidate(BaseModel):
    """A source sample, its translation if one could be assembled, and the per-field evidence"""

    model_config = ConfigDict(frozen=True)

    source: Sample
    target: Optional[Sample] = None
    outcomes: tuple[TranslationOutcome, ...] = ()
    span_error: Optional[str] = Field(None, description="Span extraction rejection reason")
    src_lang: LanguageTag
    tgt_lang: LanguageTag

    @property
    def id(self) -> str:
        return self.source.id

    @property
    def rejectable(self) -> bool:
        return (
            self.target is None
            or self.span_error is not None
            or not all(outcome.terminated_by_stop for outcome in self.outcomes)
        )

    @property
    def pair(self) -> ParallelPair:
        if self.target is None:
            raise ValueError(f"candidate '{self.id}' has no target sample")
        return ParallelPair(src=self.source, tgt=self.target, src_lang=self.src_lang, tgt_lang=self.tgt_lang)

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "src_lang": self.src_lang.code,
            "tgt_lang": self.tgt_lang.code,
            "source": self.source.to_record(),
            "target": self.target.to_record() if self.target is not None else None,
            "span_error": self.span_error,
            "outcomes": [outcome.model_dump(mode="json") for outcome in self.outcomes],
        }


def assemble_candidate(
    sample: SampleBase,
    outcomes: list[TranslationOutcome],
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
) -> TranslationCandidate:
    """Build the target-side sample from the translated fields."""
    by_field = {outcome.field_name: outcome for outcome in outcomes}
    updates: dict[str, Any] = {}
    span_error = None

    if isinstance(sample, MathSample):
        rationale, repaired = restitch_final_answer(
            by_field["answer"].generated_text, sample.final_answer
        )
        if repaired:
            by_field["answer"] = by_field["answer"].with_note("answer_marker_restored")
        updates = {"question": by_field["question"].generated_text, "answer": rationale}
    elif isinstance(sample, QASample):
        updates["question"] = by_field["question"].generated_text
        try:
            clean, span, start = extract_marked_span(by_field["context"].generated_text)
        except SpanExtractionError as e:
            span_error = e.reason
            by_field["context"] = by_field["context"].with_note(f"span_error:{e.reason}")
        else:
            lead = len(span) - len(span.lstrip())
            updates.update(
                context=clean, answer_text=span.strip(), answer_start=start + lead
            )
    else:
        updates = {name: by_field[name].generated_text for name in ("premise", "hypothesis")}

    outcomes = [by_field[outcome.field_name] for outcome in outcomes]
    target = None
    if span_error is None:
        try:
            target = sample.with_fields(**updates)
        except ValueError as e:
            logger.debug(f"Sample '{sample.id}': translation does not form a valid sample ({e})")
    return TranslationCandidate(
        source=sample,
        target=target,
        outcomes=tuple(outcomes),
        span_error=span_error,
        src_lang=src_lang,
        tgt_lang=tgt_lang,
    )


def check_banks(
    banks: Mapping[str, FewShotBank],
    fields: tuple[str, ...],
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
) -> None:
    for field_name in fields:
        bank = banks.get(field_name)
        if bank is None:
            raise ValueError(f"no few-shot bank for field '{field_name}'")
        if bank.field_name != field_name:
            raise ValueError(f"bank for '{field_name}' holds '{bank.field_name}' examples")
        if (bank.src_lang.code, bank.tgt_lang.code) != (src_lang.code, tgt_lang.code):
            raise ValueError(
                f"bank for '{field_name}' translates {bank.src_lang.code}->{bank.tgt_lang.code}, "
                f"expected {src_lang.code}->{tgt_lang.code}"
            )


async def translate_field(
    text: str,
    bank: FewShotBank,
    budget: FieldBudget,
    gateway: Gateway,
    sample_id: str = "",
    backtick_policy: BacktickPolicy = "reject",
) -> TranslationOutcome:
    """Translate one field with one prompt; failures end up in the outcome notes."""
    job = plan_field(sample_id, text, bank, budget, backtick_policy)
    return (await run_jobs([job], gateway))[0]


async def translate_sample(
    sample: SampleBase,
    banks: Mapping[str, FewShotBank],
    budgets: Mapping[str, FieldBudget],
    gateway: Gateway,
    backtick_policy: BacktickPolicy = "reject",
) -> TranslationCandidate:
    fields = TRANSLATABLE_FIELDS[sample.kind]
    first = banks[fields[0]]
    check_banks(banks, fields, first.src_lang, first.tgt_lang)
    jobs = plan_sample(sample, fields, banks, budgets, backtick_policy)
    outcomes = await run_jobs(jobs, gateway)
    return assemble_candidate(sample, outcomes, first.src_lang, first.tgt_lang)


def record_outcomes(manifest: RunManifest, outcomes: list[TranslationOutcome]) -> None:
    for outcome in outcomes:
        manifest.entries.append(
            ManifestEntry(
                sample_id=outcome.sample_id,
                field=outcome.field_name,
                prompt_sha256=outcome.prompt_sha256,
                terminated_by_stop=outcome.terminated_by_stop,
                notes=list(outcome.notes),
            )
        )
        manifest.count("fields")
        if not outcome.terminated_by_stop:
            manifest.count("fields_unterminated")
        for note in outcome.notes:
            manifest.count(f"note:{note.split(':', 1)[0]}")


async def translate_dataset(
    dataset: Dataset,
    tgt: LanguageTag,
    banks: Mapping[str, FewShotBank],
    budgets: Mapping[str, FieldBudget],
    gateway: Gateway,
    backtick_policy: BacktickPolicy = "reject",
    on_progress: Optional[Callable[[int], None]] = None,
    on_planned: Optional[Callable[[int], None]] = None,
) -> tuple[list[TranslationCandidate], RunManifest]:
    """Translate every sample of a source dataset field by field.

    All prompts go out as one batch through the gateway, so the in-flight
    cap never changes the result order.

    Returns:
        tuple: One candidate per input sample in input order, and the run manifest
    """
    if dataset.role != DatasetRole.SOURCE:
        raise ValueError(f"translate_dataset needs a source dataset, got role '{dataset.role.value}'")
    fields = TRANSLATABLE_FIELDS[dataset.task]
    check_banks(banks, fields, dataset.language, tgt)
    manifest = RunManifest(task=dataset.task.value, src_lang=dataset.language.code, tgt_lang=tgt.code)
    manifest.count("samples", dataset.size)

    plans = [plan_sample(s, fields, banks, budgets, backtick_policy) for s in dataset.samples]
    flat_jobs = [job for jobs in plans for job in jobs]
    requests = sum(len(job.requests) for job in flat_jobs)
    manifest.count("requests", requests)
    if on_planned is not None:
        on_planned(requests)
    logger.info(f"Translating {dataset.size} samples ({len(flat_jobs)} fields) into {tgt.display_name}")
    outcomes = await run_jobs(flat_jobs, gateway, on_progress)

    candidates = []
    cursor = 0
    for sample, jobs in zip(dataset.samples, plans):
        candidate = assemble_candidate(
            sample, outcomes[cursor : cursor + len(jobs)], dataset.language, tgt
        )
        cursor += len(jobs)
        record_outcomes(manifest, list(candidate.outcomes))
        if candidate.span_error:
            manifest.count(candidate.span_error)
        candidates.append(candidate)

    manifest.gateway = gateway.stats.model_dump()
    errors = sum(gateway.stats.errors.values())
    if errors:
        manifest.warn(f"{errors} request(s) failed at the gateway, see entry notes")
    return candidates, manifest


async def translate_test_inputs(
    dataset: Dataset,
    to: LanguageTag,
    banks: Mapping[str, FewShotBank],
    budgets: Mapping[str, FieldBudget],
    gateway: Gateway,
    backtick_policy: BacktickPolicy = "reject",
    manifest: Optional[RunManifest] = None,
) -> Dataset:
    """Translate only the input fields of an evaluation set into another language.

    References (answers, labels) are left untouched. A field whose request
    failed keeps its original text and is reported in the manifest.
    """
    if dataset.task == TaskKind.QA:
        raise ValueError("translate-test does not apply to extractive QA: the answer span would change language")
    fields = INPUT_FIELDS[dataset.task]
    notes = dataset.notes + ("translate-test",)
    if dataset.size == 0:
        return dataset.derive((), language=to, notes=notes)
    check_banks(banks, fields, dataset.language, to)

    plans = [plan_sample(s, fields, banks, budgets, backtick_policy) for s in dataset.samples]
    outcomes = await run_jobs([job for jobs in plans for job in jobs], gateway)

    samples = []
    cursor = 0
    for sample, jobs in zip(dataset.samples, plans):
        sample_outcomes = outcomes[cursor : cursor + len(jobs)]
        cursor += len(jobs)
        updates = {}
        for outcome in sample_outcomes:
            if outcome.generated_text.strip() and not any(
                note.startswith(("gateway_error", "delimiter_collision")) for note in outcome.notes
            ):
                updates[outcome.field_name] = outcome.generated_text
            elif manifest is not None:
                manifest.warn(f"Kept original '{outcome.field_name}' of sample '{sample.id}'")
        samples.append(sample.with_fields(**updates) if updates else sample)
        if manifest is not None:
            record_outcomes(manifest, sample_outcomes)
    return dataset.derive(samples, language=to, notes=notes)


def write_candidates(path: str | Path, candidates: list[TranslationCandidate]) -> int:
    return write_jsonl(path, (candidate.to_record() for candidate in candidates))


def read_candidates(
    path: str | Path, task: TaskKind, src_lang: LanguageTag, tgt_lang: LanguageTag
) -> list[TranslationCandidate]:
    """Load candidates saved by write_candidates."""
    candidates = []
    for line_number, line in iter_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{line_number}: malformed JSON line", line_number=line_number) from e
        if (record.get("src_lang"), record.get("tgt_lang")) != (src_lang.code, tgt_lang.code):
            raise DatasetError(
                f"{path}:{line_number}: candidate languages do not match {src_lang.code}->{tgt_lang.code}",
                line_number=line_number,
            )
        target = record.get("target")
        candidates.append(
            TranslationCandidate(
                source=parse_sample(record["source"], task, line_number=line_number),
                target=parse_sample(target, task, line_number=line_number) if target else None,
                outcomes=tuple(TranslationOutcome.model_validate(o) for o in record["outcomes"]),
                span_error=record.get("span_error"),
                src_lang=src_lang,
                tgt_lang=tgt_lang,
            )
        )
    return candidates
