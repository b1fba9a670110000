"""Unit tests for corpus.py module."""

import json
from fractions import Fraction

import pytest
from pydantic import ValidationError

from corpus import (
    KNOWN_LANGUAGES,
    Dataset,
    DatasetError,
    DatasetRole,
    LanguageTag,
    MathSample,
    NLILabel,
    NLISample,
    ParallelPair,
    QASample,
    SpanMismatchError,
    TaskKind,
    language_from_code,
    pair_from_record,
    parse_sample,
    read_dataset,
    read_parallel,
    take_subset,
    to_fraction,
    write_dataset,
)
from tests.conftest import write_records


class TestLanguageTag:
    """Tests for language metadata."""

    def test_default_weights(self):
        """Test the built-in character weights."""
        assert KNOWN_LANGUAGES["zh"].char_weight == 3
        for code in ("en", "de", "ru", "th"):
            assert KNOWN_LANGUAGES[code].char_weight == 1

    @pytest.mark.parametrize("code", ["", "EN", "de-DE", "日本", "pt br", "1x", "en:"])
    def test_invalid_code(self, code):
        """Test that codes must be lowercase ASCII tags."""
        with pytest.raises(ValidationError):
            LanguageTag(code=code, display_name="x")

    def test_weight_must_be_positive(self):
        """Test that a zero weight is rejected."""
        with pytest.raises(ValidationError):
            LanguageTag(code="xx", display_name="X", char_weight=0)

    def test_weight_from_string(self):
        """Test that weights accept rational strings."""
        tag = LanguageTag(code="ja", display_name="Japanese", char_weight="5/2")
        assert tag.char_weight == Fraction(5, 2)
        assert tag.model_dump(mode="json")["char_weight"] == "5/2"

    def test_language_from_code(self):
        """Test registry lookup, overrides and unknown codes."""
        assert language_from_code("de").display_name == "German"
        assert language_from_code("zh", {"zh": {"char_weight": 2}}).char_weight == 2
        unknown = language_from_code("sw")
        assert unknown.char_weight == 1
        assert unknown.display_name == "sw"

    def test_to_fraction(self):
        """Test rational coercion."""
        assert to_fraction("1/3") == Fraction(1, 3)
        assert to_fraction(3) == 3
        assert to_fraction(0.5) == Fraction(1, 2)
        with pytest.raises(ValueError):
            to_fraction(True)
        with pytest.raises(ValueError):
            to_fraction("abc")


class TestSamples:
    """Tests for the task sample types."""

    def test_math_final_answer(self, math_record):
        """Test that the final answer follows the '#### ' marker."""
        sample = parse_sample(math_record, TaskKind.MATH)
        assert isinstance(sample, MathSample)
        assert sample.final_answer == "72"
        assert sample.output_projection().endswith("#### 72")
        assert sample.input_projection() == {"question": math_record["question"]}

    def test_math_without_marker(self):
        """Test that a rationale without a marker is rejected."""
        with pytest.raises(DatasetError):
            parse_sample({"question": "q", "answer": "no marker here"}, TaskKind.MATH, default_id="1")

    def test_math_non_numeric_answer(self):
        """Test that the final answer must be a numeric literal."""
        with pytest.raises(DatasetError):
            parse_sample({"id": "x", "question": "q", "answer": "so\n#### seventy"}, TaskKind.MATH)

    def test_qa_span(self, qa_records):
        """Test a valid QA record and its projections."""
        sample = parse_sample(qa_records[0], TaskKind.QA)
        assert isinstance(sample, QASample)
        assert sample.context[sample.answer_start :].startswith("Paris")
        assert sample.input_projection()["question"] == "What is the capital of France?"
        assert sample.output_projection() == "Paris"

    def test_qa_span_mismatch(self, qa_records):
        """Test that a wrong offset names the sample id."""
        record = {**qa_records[0], "answer_start": 0}
        with pytest.raises(SpanMismatchError) as exc:
            parse_sample(record, TaskKind.QA, line_number=4)
        assert exc.value.sample_id == "q00"
        assert "q00" in str(exc.value)
        assert exc.value.line_number == 4

    def test_qa_not_extractable(self):
        """Test that non-extractable answers skip the span check."""
        sample = QASample(
            id="a", context="Hallo Welt", question="Q", answer_text="World", answer_start=-1, extractable=False
        )
        assert sample.to_record()["extractable"] is False

    def test_nli_label_case(self, nli_records):
        """Test that labels are accepted case-insensitively and stored lowercase."""
        labels = [parse_sample(r, TaskKind.NLI).label for r in nli_records]
        assert labels == [NLILabel.ENTAILMENT, NLILabel.CONTRADICTION, NLILabel.NEUTRAL]
        assert parse_sample(nli_records[1], TaskKind.NLI).to_record()["label"] == "contradiction"

    def test_nli_bad_label(self):
        """Test that labels outside the closed set are rejected."""
        with pytest.raises(DatasetError):
            parse_sample({"id": "1", "premise": "p", "hypothesis": "h", "label": "maybe"}, TaskKind.NLI)

    def test_integer_id(self, nli_records):
        """Test that integer ids become strings."""
        sample = parse_sample({**nli_records[0], "id": 7}, TaskKind.NLI)
        assert sample.id == "7"

    def test_field_text(self, math_record):
        """Test field access by schema name."""
        sample = parse_sample(math_record, TaskKind.MATH)
        assert sample.field_text("answer") == math_record["answer"]
        with pytest.raises(ValueError):
            sample.field_text("context")

    def test_with_fields_revalidates(self, qa_records):
        """Test that replacing fields runs validation again."""
        sample = parse_sample(qa_records[0], TaskKind.QA)
        with pytest.raises(ValidationError):
            sample.with_fields(answer_start=1)
        moved = sample.with_fields(context="Paris is nice.", answer_start=0)
        assert moved.answer_start == 0


class TestDatasetIO:
    """Tests for reading and writing datasets."""

    def test_read_preserves_order(self, tmp_path, math_record, en):
        """Test that lines keep their order and ids default to the line number."""
        second = {k: v for k, v in math_record.items() if k != "id"}
        path = write_records(tmp_path / "math.jsonl", [math_record, second])
        dataset = read_dataset(path, TaskKind.MATH, en)
        assert dataset.size == 2
        assert dataset.ids() == ["gsm-1", "2"]
        assert dataset.samples[0].final_answer == "72"

    def test_blank_lines_keep_numbering(self, tmp_path, math_record, en):
        """Test that ids stay tied to physical line numbers."""
        path = tmp_path / "math.jsonl"
        record = {k: v for k, v in math_record.items() if k != "id"}
        path.write_text("\n" + json.dumps(record) + "\n", encoding="utf-8")
        assert read_dataset(path, TaskKind.MATH, en).ids() == ["2"]

    def test_missing_file(self, tmp_path, en):
        """Test that a missing file names its path."""
        with pytest.raises(FileNotFoundError, match="nope.jsonl"):
            read_dataset(tmp_path / "nope.jsonl", TaskKind.MATH, en)

    def test_malformed_line(self, tmp_path, math_record, en):
        """Test that malformed JSON reports the line number."""
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(math_record) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(DatasetError) as exc:
            read_dataset(path, TaskKind.MATH, en)
        assert exc.value.line_number == 2
        assert ":2:" in str(exc.value)

    def test_missing_field(self, tmp_path, en):
        """Test that a schema violation is reported."""
        path = write_records(tmp_path / "bad.jsonl", [{"id": "1", "premise": "p", "label": "neutral"}])
        with pytest.raises(DatasetError, match="hypothesis"):
            read_dataset(path, TaskKind.NLI, en)

    def test_duplicate_ids(self, tmp_path, nli_records, en):
        """Test that duplicate ids are rejected with both line numbers."""
        path = write_records(tmp_path / "dup.jsonl", [nli_records[0], nli_records[0]])
        with pytest.raises(DatasetError, match="line 1"):
            read_dataset(path, TaskKind.NLI, en)

    def test_round_trip_nli(self, tmp_path, nli_records, en):
        """Test that write then read yields identical samples."""
        dataset = read_dataset(write_records(tmp_path / "in.jsonl", nli_records), TaskKind.NLI, en)
        write_dataset(dataset, tmp_path / "out.jsonl")
        again = read_dataset(tmp_path / "out.jsonl", TaskKind.NLI, en)
        assert again == dataset

    def test_round_trip_unicode(self, tmp_path, zh):
        """Test that Chinese text is written as UTF-8 and read back losslessly."""
        record = {"id": "z", "question": "小明有3个苹果，又买了4个。他有几个？", "answer": "3+4=7\n#### 7"}
        dataset = read_dataset(write_records(tmp_path / "in.jsonl", [record]), TaskKind.MATH, zh)
        write_dataset(dataset, tmp_path / "out.jsonl")
        raw = (tmp_path / "out.jsonl").read_bytes()
        assert "小明".encode("utf-8") in raw
        assert read_dataset(tmp_path / "out.jsonl", TaskKind.MATH, zh) == dataset

    def test_round_trip_metadata(self, tmp_path, en):
        """Test that provenance metadata survives a round trip."""
        sample = QASample(
            id="cs:1", context="Paris is nice.", question="Wo?", answer_text="Paris", answer_start=0,
            origin="cs_tgt_input", input_lang="de", output_lang="en", instruction="Please answer in English.",
        )
        dataset = Dataset(task=TaskKind.QA, language=en, samples=(sample,))
        write_dataset(dataset, tmp_path / "out.jsonl")
        assert read_dataset(tmp_path / "out.jsonl", TaskKind.QA, en).samples[0] == sample

    def test_write_empty(self, tmp_path, en):
        """Test that an empty dataset gives an empty file."""
        write_dataset(Dataset(task=TaskKind.MATH, language=en), tmp_path / "empty.jsonl")
        assert (tmp_path / "empty.jsonl").read_text() == ""

    def test_write_needs_parent(self, tmp_path, en):
        """Test that the parent directory must exist."""
        with pytest.raises(FileNotFoundError):
            write_dataset(Dataset(task=TaskKind.MATH, language=en), tmp_path / "missing" / "x.jsonl")


class TestDataset:
    """Tests for dataset invariants and subsets."""

    def test_mixed_kinds_rejected(self, math_record, nli_records, en):
        """Test that samples must share the task kind."""
        with pytest.raises(ValidationError):
            Dataset(
                task=TaskKind.MATH,
                language=en,
                samples=(parse_sample(math_record, TaskKind.MATH), parse_sample(nli_records[0], TaskKind.NLI)),
            )

    def test_take_subset(self, qa_records, en):
        """Test determinism, boundaries and order preservation."""
        dataset = Dataset(
            task=TaskKind.QA, language=en, samples=tuple(parse_sample(r, TaskKind.QA) for r in qa_records)
        )
        assert take_subset(dataset, 0, seed=1).size == 0
        assert take_subset(dataset, 20, seed=1) == dataset
        assert take_subset(dataset, 50, seed=1) == dataset
        first = take_subset(dataset, 5, seed=3)
        assert first == take_subset(dataset, 5, seed=3)
        positions = [dataset.ids().index(i) for i in first.ids()]
        assert positions == sorted(positions)
        assert len(set(first.ids())) == 5
        assert take_subset(dataset, 3, seed=0, head=True).ids() == ["q00", "q01", "q02"]

    def test_take_subset_negative(self, en):
        """Test that a negative size is rejected."""
        with pytest.raises(ValueError):
            take_subset(Dataset(task=TaskKind.MATH, language=en), -1, seed=0)

    def test_derive_keeps_role(self, nli_records, en):
        """Test that derive returns a new dataset with the same role."""
        dataset = Dataset(
            task=TaskKind.NLI,
            language=en,
            role=DatasetRole.TARGET,
            samples=tuple(parse_sample(r, TaskKind.NLI) for r in nli_records),
        )
        smaller = dataset.derive(dataset.samples[:1])
        assert smaller.role == DatasetRole.TARGET
        assert dataset.size == 3


class TestParallel:
    """Tests for parallel pairs."""

    def test_pair_invariants(self, nli_records, en, de):
        """Test id, kind and language checks."""
        a = parse_sample(nli_records[0], TaskKind.NLI)
        b = parse_sample(nli_records[1], TaskKind.NLI)
        with pytest.raises(ValidationError):
            ParallelPair(src=a, tgt=b, src_lang=en, tgt_lang=de)
        with pytest.raises(ValidationError):
            ParallelPair(src=a, tgt=a, src_lang=en, tgt_lang=en)
        pair = ParallelPair(src=a, tgt=a, src_lang=en, tgt_lang=de)
        assert pair.id == "n1"
        assert pair.task == TaskKind.NLI

    def test_pair_record_round_trip(self, qa_seed_pairs, en, de):
        """Test that a pair survives to_record and pair_from_record."""
        pair = qa_seed_pairs[0]
        assert pair_from_record(pair.to_record(), TaskKind.QA, en, de) == pair

    def test_pair_record_wrong_languages(self, qa_seed_pairs, en, zh):
        """Test that language mismatches are reported."""
        with pytest.raises(DatasetError):
            pair_from_record(qa_seed_pairs[0].to_record(), TaskKind.QA, en, zh)

    def test_read_parallel(self, tmp_path, nli_records, en, de):
        """Test pairing two files by id, and misalignment errors."""
        src = write_records(tmp_path / "en.jsonl", nli_records)
        tgt = write_records(tmp_path / "de.jsonl", list(reversed(nli_records)))
        pairs = read_parallel(src, tgt, TaskKind.NLI, en, de)
        assert [p.id for p in pairs] == ["n1", "n2", "n3"]
        assert isinstance(pairs[0].tgt, NLISample)

        short = write_records(tmp_path / "short.jsonl", nli_records[:2])
        with pytest.raises(DatasetError, match="n3"):
            read_parallel(src, short, TaskKind.NLI, en, de)
