import hashlib
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


def sha256_text(text: str) -> str:
    """Return the hex SHA-256 digest of a UTF-8 encoded string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json_line(record: dict[str, Any]) -> str:
    """Serialize one record as a JSON Lines row (no trailing newline)."""
    return json.dumps(record, ensure_ascii=False)


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, str]]:
    """Yield (line_number, raw_line) for every non-blank line of a JSON Lines file.

    Line numbers are 1-based so they can be quoted in error messages.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if line.strip():
                yield line_number, line


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Read a JSON Lines file into a list of dicts."""
    records = []
    for line_number, line in iter_jsonl(path):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{line_number}: malformed JSON ({e.msg})") from e
    return records


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write records as UTF-8 JSON Lines with "\\n" separators.

    Args:
        path: Output file; its parent directory must already exist
        records: Dicts to serialize, one per line

    Returns:
        int: Number of lines written
    """
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dump_json_line(record))
            f.write("\n")
            count += 1
    return count


def write_json(path: str | Path, payload: Any) -> None:
    """Write a pretty-printed, key-sorted JSON document."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def format_rate(rate: float) -> str:
    """Format a fraction in [0, 1] as a percentage string."""
    return f"{rate * 100:.1f}%"


class ManifestEntry(BaseModel):
    """One translated field of one sample"""

    sample_id: str = Field(..., description="Sample id")
    field: str = Field(..., description="Translated field name")
    prompt_sha256: str = Field(..., description="SHA-256 of the rendered prompt(s)")
    terminated_by_stop: bool = Field(..., description="Whether generation hit the stop sequence")
    notes: list[str] = Field(default_factory=list, description="Notes attached while translating")


class RunManifest(BaseModel):
    """Provenance record of a pipeline run.

    The manifest collects per-field translation entries, aggregate counts,
    gateway statistics, warnings and, once filtering ran, the filter
    statistics. It is written next to the run outputs as manifest.json.
    """

    task: Optional[str] = None
    src_lang: Optional[str] = None
    tgt_lang: Optional[str] = None
    entries: list[ManifestEntry] = Field(default_factory=list)
    counts: dict[str, int] = Field(default_factory=dict)
    gateway: dict[str, Any] = Field(default_factory=dict)
    warnings: list[str] = Field(default_factory=list)
    filter_stats: Optional[dict[str, Any]] = None
    mixes: dict[str, dict[str, int]] = Field(default_factory=dict)

    def warn(self, message: str) -> None:
        """Record a warning once and log it."""
        if message not in self.warnings:
            self.warnings.append(message)
            logger.warning(message)

    def count(self, key: str, amount: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + amount

    def note_counts(self) -> dict[str, int]:
        """Count entry notes by label (the part before the first colon)."""
        labels = Counter(
            note.split(":", 1)[0] for entry in self.entries for note in entry.notes
        )
        return dict(sorted(labels.items()))

    def digest(self) -> str:
        """Hash of the per-field entries, stable across reruns and concurrency levels."""
        payload = json.dumps(
            [entry.model_dump() for entry in self.entries],
            ensure_ascii=False,
            sort_keys=True,
        )
        return sha256_text(payload)

    def save(self, path: str | Path) -> None:
        write_json(path, self.model_dump(mode="json"))

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Manifest not found: {path}")
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as e:
            raise ValueError(f"Unreadable manifest {path}: {e}") from e
