import logging
from collections import Counter
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Optional

from pydantic import BaseModel, Field, model_validator

from corpus import KNOWN_LANGUAGES, LanguageTag, ParallelPair, Ratio
from translate import TranslationCandidate, TranslationOutcome, strip_answer_tags
from utilities import RunManifest, write_jsonl

logger = logging.getLogger(__name__)


class RejectionReason(str, Enum):
    RATIO_LOW = "ratio_low"
    RATIO_HIGH = "ratio_high"
    INCOMPLETE_GENERATION = "incomplete_generation"
    SPAN_MISSING_TAG = "span_missing_tag"
    SPAN_DUPLICATE_TAG = "span_duplicate_tag"
    SPAN_CROSSED_TAG = "span_crossed_tag"
    DELIMITER_COLLISION = "delimiter_collision"


def default_weight_map() -> dict[str, Fraction]:
    return {code: tag.char_weight for code, tag in KNOWN_LANGUAGES.items()}


class FilterConfig(BaseModel):
    """Quality filter thresholds"""

    min_ratio: Ratio = Field(Fraction(1, 3), description="Lowest accepted target/source length ratio")
    max_ratio: Ratio = Field(Fraction(3), description="Highest accepted target/source length ratio")
    weight_map: dict[str, Ratio] = Field(
        default_factory=default_weight_map, description="Character weight per language code"
    )
    boundary_inclusive: bool = Field(True, description="Keep ratios exactly at the bounds")

    @model_validator(mode="after")
    def check_bounds(self) -> "FilterConfig":
        if not 0 < self.min_ratio < self.max_ratio:
            raise ValueError("ratio bounds must satisfy 0 < min_ratio < max_ratio")
        if any(weight <= 0 for weight in self.weight_map.values()):
            raise ValueError("character weights must be positive")
        return self

    def weight_for(self, code: str, manifest: Optional[RunManifest] = None) -> Fraction:
        if code in self.weight_map:
            return self.weight_map[code]
        message = f"No character weight for language '{code}', counting characters as 1"
        if manifest is not None:
            manifest.warn(message)
        else:
            logger.warning(message)
        return Fraction(1)


class RejectionRecord(BaseModel):
    sample_id: str
    reason: RejectionReason
    field_name: str
    measured_ratio: Optional[Ratio] = None
    primary: bool = Field(True, description="First failing field of the sample")


class FilterStats(BaseModel):
    """Removal statistics per sample (primary reasons) and per field"""

    total: int = 0
    kept: int = 0
    rejected_by_reason: dict[str, int] = Field(default_factory=dict)
    removal_rate: float = 0.0
    field_total: int = 0
    field_rejections: dict[str, int] = Field(default_factory=dict)

    @property
    def rejected(self) -> int:
        return sum(self.rejected_by_reason.values())


class FilterResult(NamedTuple):
    kept: list[ParallelPair]
    rejections: list[RejectionRecord]
    stats: FilterStats


def weighted_length(text: str, lang: LanguageTag) -> Fraction:
    """Character count of the trimmed text times the language's weight."""
    return len(text.strip()) * lang.char_weight


def length_ratio_ok(
    src_text: str,
    src_lang: LanguageTag,
    tgt_text: str,
    tgt_lang: LanguageTag,
    cfg: FilterConfig,
) -> tuple[bool, Fraction]:
    """Check the weighted target/source length ratio against the configured bounds.

    Raises:
        ValueError: The source has zero weighted length
    """
    src_length = weighted_length(src_text, src_lang)
    if src_length == 0:
        raise ValueError("length ratio is undefined for an empty source text")
    ratio = weighted_length(tgt_text, tgt_lang) / src_length
    if cfg.boundary_inclusive:
        ok = cfg.min_ratio <= ratio <= cfg.max_ratio
    else:
        ok = cfg.min_ratio < ratio < cfg.max_ratio
    return ok, ratio


def completeness_ok(outcome: TranslationOutcome) -> bool:
    return outcome.terminated_by_stop


def check_outcome(
    outcome: TranslationOutcome,
    candidate: TranslationCandidate,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
    cfg: FilterConfig,
) -> tuple[Optional[RejectionReason], Optional[Fraction]]:
    """First failing rule for one translated field, or (None, ratio)."""
    if "delimiter_collision" in outcome.notes:
        return RejectionReason.DELIMITER_COLLISION, None
    if not completeness_ok(outcome):
        return RejectionReason.INCOMPLETE_GENERATION, None
    if outcome.field_name == "context" and candidate.span_error:
        return RejectionReason(candidate.span_error), None

    src_text = strip_answer_tags(outcome.source_text)
    if weighted_length(src_text, src_lang) == 0:
        return None, None
    ok, ratio = length_ratio_ok(src_text, src_lang, strip_answer_tags(outcome.generated_text), tgt_lang, cfg)
    if ok:
        return None, ratio
    if ratio < cfg.min_ratio or (ratio == cfg.min_ratio and not cfg.boundary_inclusive):
        return RejectionReason.RATIO_LOW, ratio
    return RejectionReason.RATIO_HIGH, ratio


def filter_candidates(
    candidates: list[TranslationCandidate],
    cfg: FilterConfig,
    manifest: Optional[RunManifest] = None,
) -> FilterResult:
    """Keep candidates whose every translated field passes the quality rules.

    Fields are checked for a delimiter collision, then completeness, then the
    answer span (QA contexts), then the weighted length ratio. Each failing
    field yields a RejectionRecord; the first one of a sample is its primary
    reason.
    """
    kept: list[ParallelPair] = []
    rejections: list[RejectionRecord] = []
    primary_reasons: Counter[str] = Counter()
    field_reasons: Counter[str] = Counter()
    field_total = 0

    for candidate in candidates:
        src_lang = candidate.src_lang.model_copy(
            update={"char_weight": cfg.weight_for(candidate.src_lang.code, manifest)}
        )
        tgt_lang = candidate.tgt_lang.model_copy(
            update={"char_weight": cfg.weight_for(candidate.tgt_lang.code, manifest)}
        )
        records = []
        for outcome in candidate.outcomes:
            field_total += 1
            reason, ratio = check_outcome(outcome, candidate, src_lang, tgt_lang, cfg)
            if reason is None:
                continue
            records.append(
                RejectionRecord(
                    sample_id=candidate.id,
                    reason=reason,
                    field_name=outcome.field_name,
                    measured_ratio=ratio,
                    primary=not records,
                )
            )
        if not records and candidate.target is None:
            records.append(
                RejectionRecord(
                    sample_id=candidate.id,
                    reason=RejectionReason.INCOMPLETE_GENERATION,
                    field_name="sample",
                )
            )

        if records:
            primary_reasons[records[0].reason.value] += 1
            field_reasons.update(record.reason.value for record in records)
            rejections.extend(records)
        else:
            kept.append(candidate.pair)

    total = len(candidates)
    rejected = total - len(kept)
    stats = FilterStats(
        total=total,
        kept=len(kept),
        rejected_by_reason=dict(sorted(primary_reasons.items())),
        removal_rate=float(Fraction(rejected, total)) if total else 0.0,
        field_total=field_total,
        field_rejections=dict(sorted(field_reasons.items())),
    )
    logger.info(f"Kept {stats.kept}/{stats.total} samples ({stats.removal_rate:.1%} removed)")
    if manifest is not None:
        manifest.filter_stats = stats.model_dump(mode="json")
    return FilterResult(kept, rejections, stats)


def write_rejections(path: str | Path, records: list[RejectionRecord]) -> int:
    return write_jsonl(path, (record.model_dump(mode="json") for record in records))
