"""Unit tests for prompting.py module."""

import json

import pytest
from pydantic import ValidationError

from corpus import KNOWN_LANGUAGES, TaskKind
from prompting import (
    DelimiterCollisionError,
    FewShotBank,
    PromptError,
    RenderedPrompt,
    build_translation_prompt,
    guard_delimiter,
    load_bank,
    render_code_switch_instruction,
    sample_few_shots,
)
from tests.conftest import FIXTURES
from utilities import RunManifest

GOLDEN_SOURCE = "A farmer has 12 cows and buys 5 more. How many cows does he have now?"


def make_bank(pairs, tgt="de"):
    return FewShotBank(
        task=TaskKind.MATH,
        field_name="question",
        pairs=tuple(pairs),
        src_lang=KNOWN_LANGUAGES["en"],
        tgt_lang=KNOWN_LANGUAGES[tgt],
    )


class TestTranslationPrompt:
    """Tests for the few-shot translation prompt."""

    def test_single_pair(self):
        """Test the exact rendering of a one-pair bank."""
        prompt = build_translation_prompt(make_bank([("Hello", "Hallo")]), "Good morning")
        assert prompt.text == "en: `Hello`\nde: `Hallo`\n\nen: `Good morning`\nde: `"
        assert prompt.stop_sequence == "`"

    @pytest.mark.parametrize("lang", ["de", "ru", "zh", "th"])
    def test_golden_prompts(self, lang):
        """Test the shipped 8-pair banks against the golden prompt files byte for byte."""
        bank = load_bank(FIXTURES / "banks" / f"{lang}.json")
        assert len(bank.pairs) == 8
        prompt = build_translation_prompt(bank, GOLDEN_SOURCE)
        golden = (FIXTURES / "golden" / f"{lang}.txt").read_bytes()
        assert prompt.text.encode("utf-8") == golden
        assert prompt.text.count("en: `") == 9

    def test_empty_source(self):
        """Test that an empty source is a precondition error."""
        bank = make_bank([("Hello", "Hallo")])
        with pytest.raises(PromptError):
            build_translation_prompt(bank, "")
        with pytest.raises(PromptError):
            build_translation_prompt(bank, "   ")

    def test_backtick_policy(self):
        """Test rejection and escaping of raw backticks."""
        bank = make_bank([("Hello", "Hallo")])
        with pytest.raises(DelimiterCollisionError):
            build_translation_prompt(bank, "run `ls` now")
        escaped = build_translation_prompt(bank, "run `ls` now", backtick_policy="escape")
        assert escaped.text.endswith("en: `run 'ls' now`\nde: `")
        assert guard_delimiter("plain") == "plain"

    def test_deterministic(self):
        """Test that rendering twice gives the same bytes and hash."""
        bank = load_bank(FIXTURES / "banks" / "zh.json")
        first = build_translation_prompt(bank, GOLDEN_SOURCE)
        second = build_translation_prompt(bank, GOLDEN_SOURCE)
        assert first == second
        assert first.sha256 == second.sha256

    def test_rendered_prompt_must_end_open(self):
        """Test the open-slot invariant."""
        for text in ("en: `x`", "en: `x`\nde: `y`", "`", "en: `x`\nde `", "de: `\nx"):
            with pytest.raises(ValidationError):
                RenderedPrompt(text=text)
        assert RenderedPrompt(text="en: `x`\nde: `").stop_sequence == "`"
        assert RenderedPrompt(text="zh: `").text == "zh: `"


class TestFewShotBank:
    """Tests for bank validation."""

    def test_empty_bank(self):
        """Test that a bank needs at least one pair."""
        with pytest.raises(ValidationError):
            make_bank([])

    def test_backtick_in_pair(self):
        """Test that pair texts may not contain backticks."""
        with pytest.raises(ValidationError):
            make_bank([("a `b`", "c")])

    def test_same_languages(self):
        """Test that a bank needs two languages."""
        with pytest.raises(ValidationError):
            FewShotBank(
                task=TaskKind.MATH,
                field_name="question",
                pairs=(("a", "b"),),
                src_lang=KNOWN_LANGUAGES["en"],
                tgt_lang=KNOWN_LANGUAGES["en"],
            )

    def test_json_round_trip(self, tmp_path):
        """Test saving and loading a bank."""
        bank = make_bank([("Hello", "Hallo"), ("Yes", "Ja")])
        path = tmp_path / "bank.json"
        path.write_text(json.dumps(bank.to_json()), encoding="utf-8")
        assert load_bank(path) == bank

    def test_load_missing(self, tmp_path):
        """Test that a missing bank file is reported."""
        with pytest.raises(FileNotFoundError):
            load_bank(tmp_path / "none.json")


class TestCodeSwitchInstruction:
    """Tests for the answer-language instruction."""

    def test_fallback(self):
        """Test the English fallback for an empty table."""
        assert render_code_switch_instruction(KNOWN_LANGUAGES["en"], {}) == "Please answer in English."

    def test_lookup(self):
        """Test that a table entry is returned verbatim."""
        table = {"de": "Bitte antworte auf Deutsch."}
        assert render_code_switch_instruction(KNOWN_LANGUAGES["de"], table) == "Bitte antworte auf Deutsch."

    def test_fallback_recorded(self):
        """Test that a fallback is recorded in the manifest."""
        manifest = RunManifest()
        text = render_code_switch_instruction(KNOWN_LANGUAGES["zh"], {"de": "x"}, manifest)
        assert text == "Please answer in Chinese."
        assert len(manifest.warnings) == 1
        assert "zh" in manifest.warnings[0]


class TestSampleFewShots:
    """Tests for drawing few-shot pairs."""

    def test_deterministic_draw(self, math_seed_pairs):
        """Test that the same seed draws the same pairs."""
        first = sample_few_shots(math_seed_pairs, "question", k=8, seed=5)
        assert first == sample_few_shots(math_seed_pairs, "question", k=8, seed=5)
        assert len(first.pairs) == 8
        assert len(set(first.pairs)) == 8
        assert first.tgt_lang.code == "de"

    def test_pairs_are_aligned(self, math_seed_pairs):
        """Test that each drawn pair comes from one parallel pair."""
        bank = sample_few_shots(math_seed_pairs, "answer", k=3, seed=1)
        aligned = {(p.src.rationale, p.tgt.rationale) for p in math_seed_pairs}
        assert set(bank.pairs) <= aligned

    def test_too_few_pairs(self, math_seed_pairs):
        """Test that asking for more pairs than available fails."""
        with pytest.raises(PromptError):
            sample_few_shots(math_seed_pairs[:5], "question", k=8)

    def test_unknown_field(self, math_seed_pairs):
        """Test that an unknown field is reported."""
        with pytest.raises(PromptError):
            sample_few_shots(math_seed_pairs, "premise", k=2)

    def test_empty_input(self):
        """Test that an empty pair list fails."""
        with pytest.raises(PromptError):
            sample_few_shots([], "question")

    def test_backtick_pairs_skipped(self, math_seed_pairs):
        """Test that pairs containing backticks are not drawn."""
        first = math_seed_pairs[0]
        tainted = first.model_copy(update={"src": first.src.with_fields(question="Use `x` here")})
        pairs = [tainted] + math_seed_pairs[1:]
        with pytest.raises(PromptError):
            sample_few_shots(pairs, "question", k=10, seed=0)
        bank = sample_few_shots(pairs, "question", k=9, seed=0)
        assert all("`" not in src for src, _ in bank.pairs)
