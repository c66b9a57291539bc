"""Text-to-SQL samples and JSON-lines helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .catalog import SchemaSet


@dataclass(frozen=True)
class Instance:
    id: str
    db_id: str
    question: str
    evidence: str = ""
    gold_sql: str | None = None
    gold_schema: SchemaSet | None = field(default=None, compare=False)
    flags: tuple[str, ...] = ()

    @property
    def anchor(self) -> str:
        """Evidence and question joined by a space (evidence omitted when empty)."""
        return " ".join(part for part in (self.evidence.strip(), self.question.strip()) if part)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "db_id": self.db_id,
            "question": self.question,
            "evidence": self.evidence,
            "gold_sql": self.gold_sql,
            "gold_schema": None if self.gold_schema is None else self.gold_schema.to_strings(),
        }
        if self.flags:
            rec["flags"] = list(self.flags)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Instance:
        gold = rec.get("gold_schema")
        return cls(
            id=str(rec["id"]),
            db_id=rec["db_id"],
            question=rec["question"],
            evidence=rec.get("evidence") or "",
            gold_sql=rec.get("gold_sql"),
            gold_schema=None if gold is None else SchemaSet.from_strings(gold),
            flags=tuple(rec.get("flags", ())),
        )


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def load_instances(path: str | Path) -> list[Instance]:
    return [Instance.from_record(r) for r in read_jsonl(path)]
