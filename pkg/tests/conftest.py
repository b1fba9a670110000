"""Common fixtures for self-translate-train tests."""

import json
from pathlib import Path

import pytest

from corpus import KNOWN_LANGUAGES, ParallelPair, QASample, TaskKind, parse_sample
from gateway import BackendConfig, Gateway, MockBackend, MockReply

FIXTURES = Path(__file__).parent / "fixtures"

GSM8K_QUESTION = (
    "Natalia sold clips to 48 of her friends in April, and then she sold half as many "
    "clips in May. How many clips did Natalia sell altogether in April and May?"
)
GSM8K_RATIONALE = (
    "Natalia sold 48/2 = <<48/2=24>>24 clips in May.\n"
    "Natalia sold 48+24 = <<48+24=72>>72 clips altogether in April and May.\n"
    "#### 72"
)

CAPITALS = [
    ("France", "Paris"),
    ("Germany", "Berlin"),
    ("Italy", "Rome"),
    ("Spain", "Madrid"),
    ("Japan", "Tokyo"),
    ("Egypt", "Cairo"),
    ("Kenya", "Nairobi"),
    ("Peru", "Lima"),
    ("Canada", "Ottawa"),
    ("Norway", "Oslo"),
    ("Chile", "Santiago"),
    ("Cuba", "Havana"),
    ("Greece", "Athens"),
    ("Poland", "Warsaw"),
    ("Sweden", "Stockholm"),
    ("Austria", "Vienna"),
    ("Ireland", "Dublin"),
    ("Portugal", "Lisbon"),
    ("Hungary", "Budapest"),
    ("Finland", "Helsinki"),
]

# (name, job in English, job in German)
WORKERS = [
    ("Anna", "baker", "Bäckerin"),
    ("Ben", "tailor", "Schneider"),
    ("Clara", "doctor", "Ärztin"),
    ("David", "farmer", "Bauer"),
    ("Emma", "painter", "Malerin"),
    ("Felix", "pilot", "Pilot"),
    ("Greta", "nurse", "Krankenschwester"),
    ("Hans", "cook", "Koch"),
    ("Ida", "judge", "Richterin"),
    ("Jonas", "driver", "Fahrer"),
]


def qa_record(sample_id: str, context: str, question: str, answer: str) -> dict:
    return {
        "id": sample_id,
        "context": context,
        "question": question,
        "answer_text": answer,
        "answer_start": context.index(answer),
    }


def capital_records() -> list[dict]:
    """Twenty three-sentence QA records whose answer sits in the middle sentence."""
    return [
        qa_record(
            f"q{i:02d}",
            f"{country} is a country with a long history. Its capital city is {capital}. "
            "Many tourists visit it every year.",
            f"What is the capital of {country}?",
            capital,
        )
        for i, (country, capital) in enumerate(CAPITALS)
    ]


def worker_records() -> tuple[list[dict], list[dict]]:
    """Aligned English/German QA seed records."""
    en, de = [], []
    for i, (name, job_en, job_de) in enumerate(WORKERS):
        en.append(
            qa_record(
                f"s{i}",
                f"{name} lives in a small village. {name} works as a {job_en}. The village is quiet.",
                f"What does {name} work as?",
                job_en,
            )
        )
        de.append(
            qa_record(
                f"s{i}",
                f"{name} wohnt in einem kleinen Dorf. {name} arbeitet als {job_de}. Das Dorf ist ruhig.",
                f"Als was arbeitet {name}?",
                job_de,
            )
        )
    return en, de


def math_seed_records() -> tuple[list[dict], list[dict]]:
    en, de = [], []
    for i in range(10):
        a, b = 3 + i, 5 + 2 * i
        en.append(
            {
                "id": f"m{i}",
                "question": f"Tom has {a} apples and buys {b} more. How many apples does he have?",
                "answer": f"Tom has {a} + {b} = {a + b} apples.\n#### {a + b}",
            }
        )
        de.append(
            {
                "id": f"m{i}",
                "question": f"Tom hat {a} Äpfel und kauft {b} dazu. Wie viele Äpfel hat er?",
                "answer": f"Tom hat {a} + {b} = {a + b} Äpfel.\n#### {a + b}",
            }
        )
    return en, de


def write_records(path: Path, records: list[dict]) -> Path:
    path.write_text(
        "".join(json.dumps(record, ensure_ascii=False) + "\n" for record in records),
        encoding="utf-8",
    )
    return path


@pytest.fixture
def en():
    return KNOWN_LANGUAGES["en"]


@pytest.fixture
def de():
    return KNOWN_LANGUAGES["de"]


@pytest.fixture
def zh():
    return KNOWN_LANGUAGES["zh"]


@pytest.fixture
def th():
    return KNOWN_LANGUAGES["th"]


@pytest.fixture
def math_record():
    """The GSM8k example with its '#### 72' answer line."""
    return {"id": "gsm-1", "question": GSM8K_QUESTION, "answer": GSM8K_RATIONALE}


@pytest.fixture
def qa_records():
    return capital_records()


@pytest.fixture
def nli_records():
    return [
        {"id": "n1", "premise": "A man is playing a guitar.", "hypothesis": "A man plays music.", "label": "entailment"},
        {"id": "n2", "premise": "A woman reads a book.", "hypothesis": "The woman is asleep.", "label": "Contradiction"},
        {"id": "n3", "premise": "Two dogs run in a park.", "hypothesis": "The dogs are brothers.", "label": "NEUTRAL"},
    ]


@pytest.fixture
def qa_seed_pairs(en, de):
    """Ten aligned English/German QA pairs for few-shot banks."""
    src, tgt = worker_records()
    return [
        ParallelPair(
            src=parse_sample(s, TaskKind.QA),
            tgt=parse_sample(t, TaskKind.QA),
            src_lang=en,
            tgt_lang=de,
        )
        for s, t in zip(src, tgt)
    ]


@pytest.fixture
def math_seed_pairs(en, de):
    src, tgt = math_seed_records()
    return [
        ParallelPair(
            src=parse_sample(s, TaskKind.MATH),
            tgt=parse_sample(t, TaskKind.MATH),
            src_lang=en,
            tgt_lang=de,
        )
        for s, t in zip(src, tgt)
    ]


@pytest.fixture
def nli_seed_pairs(en, de):
    pairs = []
    for i in range(8):
        src = parse_sample(
            {"id": f"p{i}", "premise": f"The cat sleeps on mat {i}.", "hypothesis": "A cat rests.", "label": "entailment"},
            TaskKind.NLI,
        )
        tgt = parse_sample(
            {"id": f"p{i}", "premise": f"Die Katze schläft auf Matte {i}.", "hypothesis": "Eine Katze ruht.", "label": "entailment"},
            TaskKind.NLI,
        )
        pairs.append(ParallelPair(src=src, tgt=tgt, src_lang=en, tgt_lang=de))
    return pairs


@pytest.fixture
def qa_sample():
    return QASample.model_validate(capital_records()[0])


@pytest.fixture
def no_sleep():
    """Sleep replacement that records requested delays."""
    delays = []

    async def sleep(delay: float) -> None:
        delays.append(delay)

    sleep.delays = delays
    return sleep


@pytest.fixture
def make_gateway(no_sleep):
    """Build a gateway over a scripted mock backend."""

    def factory(script: dict[str, MockReply] | None = None, fallback: str = "echo", **config):
        backend = MockBackend(script, fallback=fallback)
        return Gateway(backend, BackendConfig(**config), sleep=no_sleep)

    return factory


@pytest.fixture
def pipeline_files(tmp_path):
    """Input data, few-shot seed files and a config for a QA en->de run."""
    src_seeds, tgt_seeds = worker_records()
    data = tmp_path / "data"
    data.mkdir()
    write_records(data / "train_en.jsonl", capital_records())
    write_records(data / "seeds_en.jsonl", src_seeds)
    write_records(data / "seeds_de.jsonl", tgt_seeds)
    config = {
        "task": "qa",
        "src_lang": "en",
        "tgt_lang": "de",
        "input_path": "data/train_en.jsonl",
        "fewshot": {"src_path": "data/seeds_en.jsonl", "tgt_path": "data/seeds_de.jsonl", "k": 8, "seed": 0},
        "backend": {"kind": "mock"},
        "instruction_table": {"de": "Bitte antworte auf Deutsch."},
        "output_dir": "out",
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return {"root": tmp_path, "config": config_path, "data": data, "raw": config}
