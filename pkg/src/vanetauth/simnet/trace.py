"""Newline-delimited JSON event trace.

Every line is one record with a fixed field order:
``{"t", "kind", "actor", "digest", "outcome", "data"}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from ..errors import CorruptTrace

FIELDS = ("t", "kind", "actor", "digest", "outcome", "data")


@dataclass(frozen=True)
class EventRecord:
    t: float
    kind: str
    actor: str = ""
    digest: str = ""
    outcome: str = ""
    data: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "kind": self.kind, "actor": self.actor, "digest": self.digest,
                "outcome": self.outcome, "data": self.data}


class EventTrace:
    """Append-only trace held as serialized lines (compact for long runs)."""

    def __init__(self, lines: Iterable[str] = ()):
        self.lines: list[str] = list(lines)

    def append(self, record: dict[str, Any]) -> None:
        self.lines.append(dumps(record))

    def __len__(self) -> int:
        return len(self.lines)

    def records(self) -> Iterator[dict[str, Any]]:
        return (json.loads(line) for line in self.lines)

    def to_bytes(self) -> bytes:
        return "".join(line + "\n" for line in self.lines).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, separators=(",", ":"))


def trace_bytes(records: Iterable[dict[str, Any]]) -> bytes:
    return "".join(dumps(r) + "\n" for r in records).encode()


def trace_digest(records: Iterable[dict[str, Any]]) -> str:
    return hashlib.sha256(trace_bytes(records)).hexdigest()


def parse_trace(text: str) -> list[dict[str, Any]]:
    """Parse a trace; an empty trace is valid, a truncated one is not."""
    if not text.strip():
        return []
    if not text.endswith("\n"):
        raise CorruptTrace("trace does not end with a newline (truncated write?)")
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptTrace(f"line {lineno}: {exc.msg}") from None
        if not isinstance(rec, dict) or tuple(rec) != FIELDS:
            raise CorruptTrace(f"line {lineno}: unexpected record layout")
        records.append(rec)
    if records[0]["kind"] != "run_start":
        raise CorruptTrace("trace does not start with run_start")
    if records[-1]["kind"] != "run_end":
        raise CorruptTrace("trace has no run_end record (truncated)")
    return records


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CorruptTrace(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise CorruptTrace(f"{path} is not UTF-8 text") from None
    return parse_trace(text)
