import logging
import math
import re
import string
import unicodedata
from collections import Counter
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Any, Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_serializer
from scipy.special import betainc

from corpus import Dataset, MathSample, NLILabel, NLISample, QASample, TaskKind

logger = logging.getLogger(__name__)

MAX_NGRAM_ORDER = 4
FLOOR_SMOOTHING = 0.1
ANSWER_MARKER = "####"


class EvaluationError(ValueError):
    """Evaluation inputs are unusable."""


# ---------------------------------------------------------------------------
# Tokenizers


def normalize_13a(text: str) -> str:
    """mteval-v13a text normalization: skipped markers, line joins and entities."""
    norm = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in norm:
        norm = norm.replace("&quot;", '"').replace("&amp;", "&")
        norm = norm.replace("&lt;", "<").replace("&gt;", ">")
    return norm


def regex_tokenize(norm: str) -> list[str]:
    """The 13a punctuation and digit rules applied to normalized text."""
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return norm.split()


def tokenize_13a(text: str) -> list[str]:
    """mteval-v13a tokenization as used by WMT and SacreBLEU."""
    return regex_tokenize(normalize_13a(text))


# Bounds are compared as strings, so "\u20000" is "\u2000" followed by
# "0", as in the mteval-derived scorers.
_CJK_RANGES = (
    ("\u3400", "\u4db5"),
    ("\u4e00", "\u9fa5"),
    ("\u9fa6", "\u9fbb"),
    ("\uf900", "\ufa2d"),
    ("\ufa30", "\ufa6a"),
    ("\ufa70", "\ufad9"),
    ("\u20000", "\u2a6d6"),
    ("\u2f800", "\u2fa1d"),
    ("\uff00", "\uffef"),
    ("\u2e80", "\u2eff"),
    ("\u3000", "\u303f"),
    ("\u31c0", "\u31ef"),
    ("\u2f00", "\u2fdf"),
    ("\u2ff0", "\u2fff"),
    ("\u3100", "\u312f"),
    ("\u31a0", "\u31bf"),
    ("\ufe10", "\ufe1f"),
    ("\ufe30", "\ufe4f"),
    ("\u2600", "\u26ff"),
    ("\u2700", "\u27bf"),
    ("\u3200", "\u32ff"),
    ("\u3300", "\u33ff"),
)


def is_chinese_char(char: str) -> bool:
    return any(start <= char <= end for start, end in _CJK_RANGES)


def tokenize_zh(text: str) -> list[str]:
    """Isolate each CJK character, then tokenize the rest by the 13a rules."""
    norm = normalize_13a(text).strip()
    return regex_tokenize("".join(f" {c} " if is_chinese_char(c) else c for c in norm))


def tokenize_char(text: str) -> list[str]:
    """Every non-whitespace character is a token."""
    return [c for c in text if not c.isspace()]


TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "13a": tokenize_13a,
    "zh": tokenize_zh,
    "char": tokenize_char,
}
# Tokenizer per target language for translation quality reports
LANGUAGE_TOKENIZERS = {"de": "13a", "ru": "13a", "en": "13a", "zh": "zh", "th": "char"}


# ---------------------------------------------------------------------------
# BLEU


class BleuScore(BaseModel):
    score: float = Field(..., ge=0, le=100)
    precisions: list[float] = Field(..., description="Modified n-gram precisions in [0, 1], n = 1..4")
    brevity_penalty: float = Field(
        ..., ge=0, le=1, description="In (0, 1]; 0 only when every hypothesis is empty and the score is 0"
    )
    hyp_length: int
    ref_length: int
    tokenizer: str


def extract_ngrams(tokens: list[str], max_order: int = MAX_NGRAM_ORDER) -> Counter:
    ngrams: Counter = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(tokens) - n + 1):
            ngrams[tuple(tokens[i : i + n])] += 1
    return ngrams


def corpus_bleu(
    hypotheses: list[str],
    references: list[str],
    tokenizer: str = "13a",
    smoothing: Literal["exp", "floor", "none"] = "exp",
) -> BleuScore:
    """Corpus-level BLEU against a single reference per segment.

    Matches are clipped per segment and summed over the corpus before the
    precisions are combined. When the corpus has no n-grams of some order
    (all segments shorter than n tokens) the geometric mean runs over the
    orders that exist, so a corpus scored against itself gets 100.

    Args:
        hypotheses: System outputs, one per segment
        references: Reference translations, aligned with hypotheses
        tokenizer: "13a", "zh" or "char"
        smoothing: "exp" halves the credit for each further zero-match order,
            "floor" gives zero-match orders 0.1 matches, "none" leaves them at zero

    Returns:
        BleuScore: Score in [0, 100] with its sufficient statistics
    """
    if len(hypotheses) != len(references):
        raise EvaluationError(
            f"{len(hypotheses)} hypotheses but {len(references)} references"
        )
    if not hypotheses:
        raise EvaluationError("cannot score an empty corpus")
    if tokenizer not in TOKENIZERS:
        raise EvaluationError(f"unknown tokenizer '{tokenizer}', choose from {sorted(TOKENIZERS)}")
    tokenize = TOKENIZERS[tokenizer]

    correct = [0] * MAX_NGRAM_ORDER
    total = [0] * MAX_NGRAM_ORDER
    hyp_len = ref_len = 0
    for hypothesis, reference in zip(hypotheses, references):
        hyp_tokens, ref_tokens = tokenize(hypothesis), tokenize(reference)
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        hyp_ngrams, ref_ngrams = extract_ngrams(hyp_tokens), extract_ngrams(ref_tokens)
        for ngram, count in hyp_ngrams.items():
            n = len(ngram) - 1
            total[n] += count
            correct[n] += min(count, ref_ngrams.get(ngram, 0))

    if hyp_len == 0:
        return BleuScore(
            score=0.0, precisions=[0.0] * MAX_NGRAM_ORDER, brevity_penalty=0.0,
            hyp_length=0, ref_length=ref_len, tokenizer=tokenizer,
        )

    precisions = [0.0] * MAX_NGRAM_ORDER
    effective_order = 0
    smooth = 1.0
    for n in range(MAX_NGRAM_ORDER):
        if total[n] == 0:
            break
        effective_order = n + 1
        if correct[n] > 0:
            precisions[n] = correct[n] / total[n]
        elif smoothing == "exp":
            smooth *= 2
            precisions[n] = 1.0 / (smooth * total[n])
        elif smoothing == "floor":
            precisions[n] = FLOOR_SMOOTHING / total[n]

    brevity_penalty = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    used = precisions[:effective_order]
    if min(used) <= 0:
        score = 0.0
    else:
        score = brevity_penalty * math.exp(sum(math.log(p) for p in used) / effective_order) * 100
    return BleuScore(
        score=min(score, 100.0),
        precisions=precisions,
        brevity_penalty=brevity_penalty,
        hyp_length=hyp_len,
        ref_length=ref_len,
        tokenizer=tokenizer,
    )


# ---------------------------------------------------------------------------
# Task metrics

NUMBER_PATTERN = re.compile(
    r"(?:(?<![\w.])[-+])?(?:\d{1,3}(?:,\d{3})+(?!\d)|\d+)(?:\.\d+)?"
)


def normalize_number(literal: str) -> str:
    return literal.replace(",", "").lstrip("+")


def extract_final_number(output_text: str) -> str:
    """Numeric answer of a math generation.

    Takes the first number after the last "####" marker when there is one,
    otherwise the last number in the text. Thousands separators and a
    leading "+" are dropped.
    """
    if ANSWER_MARKER in output_text:
        tail = output_text.rsplit(ANSWER_MARKER, 1)[1]
        match = NUMBER_PATTERN.search(tail)
        if match:
            return normalize_number(match.group())
    matches = NUMBER_PATTERN.findall(output_text)
    if not matches:
        raise EvaluationError(f"no number found in output: {output_text[:80]!r}")
    return normalize_number(matches[-1])


def numbers_equal(a: str, b: str) -> bool:
    """Compare numeric literals by value ("72" == "72.0" == "72.00")."""
    try:
        return Decimal(normalize_number(a.strip())) == Decimal(normalize_number(b.strip()))
    except InvalidOperation:
        return a.strip() == b.strip()


def exact_match_accuracy(
    predictions: list[str],
    golds: list[str],
    comparator: Callable[[str, str], bool] = numbers_equal,
) -> float:
    if len(predictions) != len(golds):
        raise EvaluationError(f"{len(predictions)} predictions but {len(golds)} references")
    if not golds:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, golds) if comparator(p, g))
    return float(Fraction(hits, len(golds)))


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = text.lower()
    text = "".join(
        " " if c in string.punctuation or unicodedata.category(c).startswith("P") else c
        for c in text
    )
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return " ".join(text.split())


def qa_em_f1(
    pred_span: str, gold_span: str, tokenizer: Literal["whitespace", "char"] = "whitespace"
) -> tuple[int, float]:
    pred, gold = normalize_answer(pred_span), normalize_answer(gold_span)
    em = int(pred == gold)
    if tokenizer == "char":
        pred_tokens, gold_tokens = tokenize_char(pred), tokenize_char(gold)
    else:
        pred_tokens, gold_tokens = pred.split(), gold.split()
    if not pred_tokens or not gold_tokens:
        return em, float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return em, 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return em, 2 * precision * recall / (precision + recall)


NLI_KEYWORDS = re.compile(r"entailment|neutral|contradiction|contradition", re.IGNORECASE)


def nli_label_parse(output_text: str) -> NLILabel:
    """First label keyword in the output, case-insensitive."""
    match = NLI_KEYWORDS.search(output_text)
    if match is None:
        raise EvaluationError(f"no NLI label in output: {output_text[:80]!r}")
    word = match.group().lower()
    return NLILabel.CONTRADICTION if word == "contradition" else NLILabel(word)


# ---------------------------------------------------------------------------
# Significance


class SignificanceResult(BaseModel):
    t_statistic: float = Field(..., description="Infinite when both samples are constant with different means")
    degrees_of_freedom: float
    p_value: float = Field(..., ge=0, le=1)
    mean_a: float
    mean_b: float

    @field_serializer("t_statistic", when_used="json")
    def serialize_t(self, value: float) -> float | str:
        # JSON has no infinity literal
        return value if math.isfinite(value) else ("inf" if value > 0 else "-inf")

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def welch_t_test(a: list[float], b: list[float]) -> SignificanceResult:
    """Two-sided Welch's t-test for samples with possibly unequal variances.

    Degrees of freedom follow Welch-Satterthwaite; the p-value is the
    regularized incomplete beta I_{dof/(dof+t^2)}(dof/2, 1/2). With both
    variances zero the test is degenerate: p is 1 for equal means and 0
    otherwise, with dof = n_a + n_b - 2.
    """
    if len(a) < 2 or len(b) < 2:
        raise EvaluationError("each sample needs at least two values")
    xa, xb = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = len(xa), len(xb)
    mean_a, mean_b = float(xa.mean()), float(xb.mean())
    va, vb = float(xa.var(ddof=1)), float(xb.var(ddof=1))
    sa, sb = va / na, vb / nb

    if sa + sb == 0:
        dof = float(na + nb - 2)
        if mean_a == mean_b:
            return SignificanceResult(t_statistic=0.0, degrees_of_freedom=dof, p_value=1.0, mean_a=mean_a, mean_b=mean_b)
        t = math.copysign(math.inf, mean_a - mean_b)
        return SignificanceResult(t_statistic=t, degrees_of_freedom=dof, p_value=0.0, mean_a=mean_a, mean_b=mean_b)

    t = (mean_a - mean_b) / math.sqrt(sa + sb)
    dof = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    p = float(betainc(dof / 2, 0.5, dof / (dof + t * t)))
    return SignificanceResult(
        t_statistic=t,
        degrees_of_freedom=dof,
        p_value=min(max(p, 0.0), 1.0),
        mean_a=mean_a,
        mean_b=mean_b,
    )


class ScoreSummary(BaseModel):
    n: int
    mean: float
    std: float = Field(..., description="Sample standard deviation (0 for a single run)")
    scores: list[float]


def select_top(scores: list[float], top_k: Optional[int] = None) -> list[float]:
    if top_k is None:
        return list(scores)
    if top_k < 1 or top_k > len(scores):
        raise EvaluationError(f"top_k must be between 1 and {len(scores)}, got {top_k}")
    return sorted(scores, reverse=True)[:top_k]


def summarize_scores(scores: list[float], top_k: Optional[int] = None) -> ScoreSummary:
    """Mean and spread over runs, optionally over the best top_k runs only."""
    if not scores:
        raise EvaluationError("no scores to summarize")
    selected = select_top(scores, top_k)
    values = np.asarray(selected, dtype=float)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return ScoreSummary(n=len(values), mean=float(values.mean()), std=std, scores=selected)


# ---------------------------------------------------------------------------
# Prediction files


class EvaluationReport(BaseModel):
    task: TaskKind
    total: int
    missing: int = Field(0, description="Gold samples without a prediction")
    unparsed: int = Field(0, description="Predictions with no extractable answer")
    accuracy: Optional[float] = None
    em: Optional[float] = None
    f1: Optional[float] = None


CHAR_LEVEL_LANGUAGES = {"zh", "th", "ja"}


def evaluate_predictions(
    task: TaskKind, predictions: list[dict[str, Any]], gold: Dataset
) -> EvaluationReport:
    """Score {"id", "prediction"} records against a gold dataset joined by id.

    Missing and unparseable predictions count as wrong.
    """
    if gold.task != task:
        raise EvaluationError(f"gold dataset is {gold.task.value}, not {task.value}")
    by_id: dict[str, str] = {}
    for record in predictions:
        if "id" not in record or "prediction" not in record:
            raise EvaluationError("prediction records need 'id' and 'prediction'")
        by_id[str(record["id"])] = str(record["prediction"])
    extra = set(by_id) - set(gold.ids())
    if extra:
        logger.warning(f"{len(extra)} prediction(s) have no gold sample and are ignored")

    total = gold.size
    missing = unparsed = 0
    hits = 0
    em_sum = f1_sum = 0.0
    tokenizer = "char" if gold.language.code in CHAR_LEVEL_LANGUAGES else "whitespace"
    for sample in gold.samples:
        prediction = by_id.get(sample.id)
        if prediction is None:
            missing += 1
            continue
        if isinstance(sample, QASample):
            em, f1 = qa_em_f1(prediction, sample.answer_text, tokenizer)
            em_sum += em
            f1_sum += f1
            continue
        try:
            if isinstance(sample, MathSample):
                hits += numbers_equal(extract_final_number(prediction), sample.final_answer)
            elif isinstance(sample, NLISample):
                hits += nli_label_parse(prediction) == sample.label
        except EvaluationError:
            unparsed += 1

    report = EvaluationReport(task=task, total=total, missing=missing, unparsed=unparsed)
    if total == 0:
        return report
    if task == TaskKind.QA:
        return report.model_copy(update={"em": em_sum / total, "f1": f1_sum / total})
    return report.model_copy(update={"accuracy": hits / total})
