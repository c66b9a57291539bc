"""A small separable Text-to-SQL corpus for smoke tests and demos.

Three SQLite databases with 20 columns in all, and 50 single-table
questions whose words overlap the schema only at their gold columns.
``write_dataset`` lays everything out in the Spider directory format.
"""

from __future__ import annotations

import itertools
import json
import sqlite3
from dataclasses import dataclass
from pathlib import Path

from .catalog import SchemaCatalog, SchemaSet, full_set, introspect_database, serialize_schema
from .data import Instance, write_jsonl
from .llmlink import GEN_INSTRUCTION, LINK_INSTRUCTION

# table -> [(column, sql type, three sample values)]
DATABASES: dict[str, dict[str, list[tuple[str, str, tuple]]]] = {
    "zoo": {
        "animal": [
            ("species", "TEXT", ("lion", "zebra", "otter")),
            ("weight", "REAL", (190.5, 380.0, 11.2)),
            ("habitat", "TEXT", ("savanna", "river", "grassland")),
            ("diet", "TEXT", ("carnivore", "herbivore", "piscivore")),
        ],
        "keeper": [
            ("fullname", "TEXT", ("Ada Moss", "Ben Reed", "Cy Vale")),
            ("salary", "INTEGER", (41000, 52000, 39000)),
            ("shift", "TEXT", ("morning", "evening", "night")),
        ],
    },
    "library": {
        "book": [
            ("title", "TEXT", ("Dune", "Emma", "Ulysses")),
            ("pages", "INTEGER", (412, 474, 730)),
            ("genre", "TEXT", ("scifi", "romance", "modernist")),
        ],
        "author": [
            ("surname", "TEXT", ("Herbert", "Austen", "Joyce")),
            ("nationality", "TEXT", ("american", "british", "irish")),
            ("birthyear", "INTEGER", (1920, 1775, 1882)),
            ("royalties", "REAL", (1200.5, 980.0, 450.25)),
        ],
    },
    "orbit": {
        "planet": [
            ("moons", "INTEGER", (1, 79, 2)),
            ("radius", "REAL", (6371.0, 69911.0, 3389.5)),
            ("atmosphere", "TEXT", ("nitrogen", "hydrogen", "carbon")),
        ],
        "probe": [
            ("mission", "TEXT", ("Voyager", "Cassini", "Juno")),
            ("launch", "INTEGER", (1977, 1997, 2011)),
            ("budget", "REAL", (865.0, 3260.0, 1100.0)),
        ],
    },
}

_NUMERIC = {"INTEGER", "REAL"}

# (question template, sql template); {a}/{b} are column names
_ONE = [
    ("list every {a}", "SELECT {a} FROM {t}"),
    ("how many distinct {a} are there", "SELECT count(DISTINCT {a}) FROM {t}"),
]
_ONE_NUM = [("what is the largest {a}", "SELECT max({a}) FROM {t}")]
_TWO = [
    ("show each {a} together with its {b}", "SELECT {a}, {b} FROM {t}"),
    ("give the {a} sorted by {b}", "SELECT {a} FROM {t} ORDER BY {b}"),
]


def _questions() -> list[tuple[str, str, str]]:
    """(db_id, question, gold sql) triples, 50 of them, round-robin over tables."""
    per_table: list[list[tuple[str, str, str]]] = []
    for db_id, tables in DATABASES.items():
        for t, cols in tables.items():
            items = []
            for name, typ, _ in cols:
                for q, s in _ONE + (_ONE_NUM if typ in _NUMERIC else []):
                    items.append((db_id, q.format(a=name), s.format(a=name, t=t)))
            for (a, _, _), (b, _, _) in itertools.permutations(cols, 2):
                for q, s in _TWO:
                    items.append((db_id, q.format(a=a, b=b), s.format(a=a, b=b, t=t)))
            per_table.append(items)
    out = []
    for row in itertools.zip_longest(*per_table):
        out.extend(x for x in row if x is not None)
    return out[:50]


def build_database(path: Path, tables: dict) -> None:
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(path)
    try:
        for t, cols in tables.items():
            conn.execute(f"CREATE TABLE {t} ({', '.join(f'{c} {ty}' for c, ty, _ in cols)})")
            rows = list(zip(*[vals for _, _, vals in cols]))
            conn.executemany(f"INSERT INTO {t} VALUES ({', '.join('?' * len(cols))})", rows)
        conn.commit()
    finally:
        conn.close()


@dataclass
class SyntheticCorpus:
    root: Path
    catalogs: dict[str, SchemaCatalog]
    instances: list[Instance]

    def db_file(self, db_id: str) -> Path:
        return self.root / "database" / db_id / f"{db_id}.sqlite"


def write_dataset(root: str | Path) -> SyntheticCorpus:
    """Write databases, ``tables.json`` and ``dev.json`` under ``root``."""
    from .catalog import catalog_to_entry
    from .sqlast import gold_schema

    root = Path(root)
    catalogs = {}
    for db_id, tables in DATABASES.items():
        d = root / "database" / db_id
        d.mkdir(parents=True, exist_ok=True)
        build_database(d / f"{db_id}.sqlite", tables)
        catalogs[db_id] = introspect_database(d / f"{db_id}.sqlite", db_id)
    (root / "tables.json").write_text(
        json.dumps([catalog_to_entry(c) for c in catalogs.values()], indent=1), encoding="utf-8"
    )
    samples, instances = [], []
    for i, (db_id, q, sql) in enumerate(_questions()):
        samples.append({"db_id": db_id, "question": q, "query": sql})
        instances.append(Instance(f"{i:04d}", db_id, q, "", sql, gold_schema(sql, catalogs[db_id])))
    (root / "dev.json").write_text(json.dumps(samples, indent=1), encoding="utf-8")
    return SyntheticCorpus(root, catalogs, instances)


def _link_answer(schema) -> str:
    obj: dict[str, list[str]] = {}
    for e in schema:
        cols = obj.setdefault(e.table, [])
        if e.column:
            cols.append(e.column)
    return "```json\n" + json.dumps(obj) + "\n```"


def mock_llm_script(corpus: SyntheticCorpus) -> dict:
    """Script for ``MockLlmClient`` acting as a noisy oracle.

    Generation answers the gold SQL.  Database-level linking on the full
    schema answers gold plus one other table with its columns; on a reduced
    schema (or when asked twice on the same prompt) it answers gold alone.
    """
    rules = []
    for inst in corpus.instances:
        rules.append({"contains": [GEN_INSTRUCTION, f"### Question\n{inst.question}\n"],
                      "responses": [f"Here you go.\n```sql\n{inst.gold_sql}\n```"]})
    for inst in corpus.instances:
        cat = corpus.catalogs[inst.db_id]
        gold = inst.gold_schema
        extra = next(t for t in cat.tables if t.name not in gold.tables())
        noisy = gold | SchemaSet(e for e in full_set(cat) if e.table == extra.name)
        full_ddl = "### Schema\n" + serialize_schema(cat, "ddl") + "\n\n"
        rules.append({"contains": [LINK_INSTRUCTION, full_ddl, f"### Question\n{inst.question}\n"],
                      "responses": [_link_answer(noisy), _link_answer(gold)]})
        rules.append({"contains": [LINK_INSTRUCTION, f"### Question\n{inst.question}\n"],
                      "responses": [_link_answer(gold)]})
    return {"rules": rules}


def write_instances(corpus: SyntheticCorpus, path: str | Path) -> None:
    write_jsonl(path, [i.to_record() for i in corpus.instances])
