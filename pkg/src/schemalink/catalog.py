"""Relational schema catalogs: loading, introspection, subsetting, rendering.

Identifiers are stored lowercased; the original spelling is kept in
``display_name`` so prompts and generated SQL use the names the database
actually declares.
"""

from __future__ import annotations

import json
import logging
import sqlite3
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

VALUE_TYPES = ("text", "number", "time", "boolean", "other")
SAMPLE_LIMIT = 3

_TYPE_ALIASES = {
    "text": "text",
    "varchar": "text",
    "char": "text",
    "string": "text",
    "clob": "text",
    "number": "number",
    "integer": "number",
    "int": "number",
    "real": "number",
    "float": "number",
    "double": "number",
    "numeric": "number",
    "decimal": "number",
    "bigint": "number",
    "smallint": "number",
    "time": "time",
    "date": "time",
    "datetime": "time",
    "timestamp": "time",
    "boolean": "boolean",
    "bool": "boolean",
    "bit": "boolean",
}


class CatalogError(ValueError):
    """Base class for catalog construction and lookup failures."""


class CatalogParseError(CatalogError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CatalogIOError(CatalogError, OSError):
    pass


def normalize_identifier(name: str) -> str:
    norm = " ".join(str(name).split()).lower()
    if not norm:
        raise CatalogError(f"empty identifier {name!r}")
    return norm


def normalize_value_type(raw: str | None) -> str:
    """Map a declared column type onto the closed value-type enum."""
    if not raw:
        return "other"
    head = raw.strip().lower().split("(")[0].strip()
    if head in _TYPE_ALIASES:
        return _TYPE_ALIASES[head]
    # SQLite affinity rules, roughly
    if "char" in head or "text" in head or "clob" in head:
        return "text"
    if "int" in head or "real" in head or "floa" in head or "doub" in head or "num" in head:
        return "number"
    if "date" in head or "time" in head:
        return "time"
    if "bool" in head:
        return "boolean"
    return "other"


@dataclass(frozen=True, order=True)
class SchemaElementId:
    """A table (``column is None``) or a column of a table."""

    table: str
    column: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "table", normalize_identifier(self.table))
        if self.column is not None:
            object.__setattr__(self, "column", normalize_identifier(self.column))

    @property
    def is_table(self) -> bool:
        return self.column is None

    def owner(self) -> SchemaElementId:
        return SchemaElementId(self.table)

    def __str__(self) -> str:
        return self.table if self.column is None else f"{self.table}.{self.column}"

    def sort_key(self):
        return (self.table, "" if self.column is None else self.column, self.column is not None)

    @classmethod
    def parse(cls, text: str) -> SchemaElementId:
        table, sep, column = text.partition(".")
        return cls(table, column if sep else None)


class SchemaSet:
    """Immutable set of schema elements, closed under table ownership.

    Adding a column implicitly adds its table.
    """

    __slots__ = ("_elements",)

    def __init__(self, elements: Iterable[SchemaElementId | str] = ()):
        items = set()
        for e in elements:
            if isinstance(e, str):
                e = SchemaElementId.parse(e)
            items.add(e)
            if e.column is not None:
                items.add(e.owner())
        self._elements = frozenset(items)

    def __iter__(self) -> Iterator[SchemaElementId]:
        return iter(sorted(self._elements, key=SchemaElementId.sort_key))

    def __len__(self) -> int:
        return len(self._elements)

    def __contains__(self, item) -> bool:
        if isinstance(item, str):
            item = SchemaElementId.parse(item)
        return item in self._elements

    def __eq__(self, other) -> bool:
        if isinstance(other, SchemaSet):
            return self._elements == other._elements
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._elements)

    def __le__(self, other: SchemaSet) -> bool:
        return self._elements <= other._elements

    def __ge__(self, other: SchemaSet) -> bool:
        return self._elements >= other._elements

    def __or__(self, other: SchemaSet) -> SchemaSet:
        return SchemaSet(self._elements | other._elements)

    def __and__(self, other: SchemaSet) -> SchemaSet:
        # intersection of closed sets is closed
        return SchemaSet(self._elements & other._elements)

    def __sub__(self, other: SchemaSet) -> SchemaSet:
        """Difference, re-closed (surviving columns keep their table)."""
        return SchemaSet(self._elements - other._elements)

    def __bool__(self) -> bool:
        return bool(self._elements)

    def __repr__(self) -> str:
        return f"SchemaSet({self.to_strings()!r})"

    @property
    def elements(self) -> frozenset[SchemaElementId]:
        return self._elements

    def table_level(self) -> SchemaSet:
        return SchemaSet(e for e in self._elements if e.column is None)

    def column_level(self) -> frozenset[SchemaElementId]:
        # not a SchemaSet: the projection deliberately drops owning tables
        return frozenset(e for e in self._elements if e.column is not None)

    def tables(self) -> list[str]:
        return sorted(e.table for e in self._elements if e.column is None)

    def columns_of(self, table: str) -> list[str]:
        table = normalize_identifier(table)
        return sorted(e.column for e in self._elements if e.table == table and e.column is not None)

    def to_strings(self) -> list[str]:
        return [str(e) for e in self]

    @classmethod
    def from_strings(cls, items: Iterable[str]) -> SchemaSet:
        return cls(SchemaElementId.parse(s) for s in items)

    def validate(self, catalog: SchemaCatalog) -> None:
        unknown = [str(e) for e in self if not catalog.has(e)]
        if unknown:
            raise CatalogError(f"elements not in catalog {catalog.db_id!r}: {unknown}")


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    display_name: str = ""
    value_type: str = "other"
    sample_values: tuple[str, ...] = ()
    description: str = ""

    def __post_init__(self):
        if not self.display_name:
            object.__setattr__(self, "display_name", self.name)
        object.__setattr__(self, "name", normalize_identifier(self.name))
        if self.value_type not in VALUE_TYPES:
            raise CatalogError(f"value type {self.value_type!r} not in {VALUE_TYPES}")
        object.__setattr__(self, "sample_values", tuple(str(v) for v in self.sample_values))


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[ColumnSchema, ...]
    primary_key: tuple[str, ...] = ()
    display_name: str = ""

    def __post_init__(self):
        if not self.display_name:
            object.__setattr__(self, "display_name", self.name)
        object.__setattr__(self, "name", normalize_identifier(self.name))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "primary_key", tuple(normalize_identifier(c) for c in self.primary_key))
        seen = set()
        for col in self.columns:
            if col.name in seen:
                raise CatalogError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(col.name)
        missing = [c for c in self.primary_key if c not in seen]
        if missing:
            raise CatalogError(f"primary key of {self.name!r} names unknown columns {missing}")

    def column(self, name: str) -> ColumnSchema:
        key = normalize_identifier(name)
        for col in self.columns:
            if col.name == key:
                return col
        raise CatalogError(f"table {self.name!r} has no column {name!r}")

    def has_column(self, name: str) -> bool:
        key = normalize_identifier(name)
        return any(col.name == key for col in self.columns)


@dataclass(frozen=True)
class SchemaCatalog:
    """One database: ordered tables, their columns, and foreign keys.

    ``require_columns`` enforces at least one column per table; subsets
    produced by :func:`subset_catalog` may legitimately hold table-only
    entries (e.g. a table referenced only through ``COUNT(*)``).
    """

    db_id: str
    tables: tuple[TableSchema, ...]
    foreign_keys: tuple[tuple[SchemaElementId, SchemaElementId], ...] = ()
    require_columns: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        object.__setattr__(self, "foreign_keys", tuple((a, b) for a, b in self.foreign_keys))
        if not self.tables:
            raise CatalogError(f"database {self.db_id!r} has no tables")
        seen = set()
        for t in self.tables:
            if t.name in seen:
                raise CatalogError(f"duplicate table {t.name!r} in {self.db_id!r}")
            seen.add(t.name)
            if self.require_columns and not t.columns:
                raise CatalogError(f"table {t.name!r} in {self.db_id!r} has no columns")
        for a, b in self.foreign_keys:
            for end in (a, b):
                if end.column is None or not self.has(end):
                    raise CatalogError(f"foreign key endpoint {end} does not resolve in {self.db_id!r}")

    def table(self, name: str) -> TableSchema:
        key = normalize_identifier(name)
        for t in self.tables:
            if t.name == key:
                return t
        raise CatalogError(f"database {self.db_id!r} has no table {name!r}")

    def has_table(self, name: str) -> bool:
        key = normalize_identifier(name)
        return any(t.name == key for t in self.tables)

    def has(self, element: SchemaElementId) -> bool:
        for t in self.tables:
            if t.name == element.table:
                return element.column is None or t.has_column(element.column)
        return False

    def elements(self) -> SchemaSet:
        """The full element set (every table and every column)."""
        items = []
        for t in self.tables:
            items.append(SchemaElementId(t.name))
            items.extend(SchemaElementId(t.name, c.name) for c in t.columns)
        return SchemaSet(items)

    def column_ids(self) -> list[SchemaElementId]:
        return [SchemaElementId(t.name, c.name) for t in self.tables for c in t.columns]

    def element_order(self) -> dict[SchemaElementId, int]:
        """Catalog position of each element, used for deterministic tie-breaking."""
        order = {}
        for t in self.tables:
            order[SchemaElementId(t.name)] = len(order)
            for c in t.columns:
                order[SchemaElementId(t.name, c.name)] = len(order)
        return order


def _build_from_entry(entry: dict) -> SchemaCatalog:
    db_id = entry["db_id"]
    table_names = entry.get("table_names_original") or entry.get("table_names")
    if table_names is None:
        raise CatalogError(f"{db_id!r}: missing table_names_original")
    col_names = entry.get("column_names_original") or entry.get("column_names") or []
    col_display = entry.get("column_names") or col_names
    col_types = entry.get("column_types") or []
    samples = entry.get("sample_values") or []

    n_tables = len(table_names)
    per_table: list[list[ColumnSchema]] = [[] for _ in range(n_tables)]
    # global column index -> (table index, column name); index 0 is the [-1, "*"] sentinel
    index: dict[int, tuple[int, str]] = {}
    for i, (t_idx, name) in enumerate(col_names):
        if t_idx == -1:
            continue
        if not 0 <= t_idx < n_tables:
            raise CatalogError(f"{db_id!r}: column {name!r} references table index {t_idx}")
        desc = col_display[i][1] if i < len(col_display) else ""
        vtype = normalize_value_type(col_types[i] if i < len(col_types) else None)
        vals = samples[i] if i < len(samples) and samples[i] else ()
        col = ColumnSchema(name=name, display_name=name, value_type=vtype, sample_values=vals, description=desc)
        per_table[t_idx].append(col)
        index[i] = (t_idx, col.name)

    def resolve(i) -> tuple[int, str]:
        if not isinstance(i, int) or i not in index:
            raise CatalogError(f"{db_id!r}: column index {i!r} out of range")
        return index[i]

    pks: list[list[str]] = [[] for _ in range(n_tables)]
    for pk in entry.get("primary_keys", []):
        for i in pk if isinstance(pk, list) else [pk]:
            t_idx, name = resolve(i)
            pks[t_idx].append(name)

    tables = [
        TableSchema(name=name, columns=tuple(per_table[j]), primary_key=tuple(pks[j]), display_name=name)
        for j, name in enumerate(table_names)
    ]
    fks = []
    for a, b in entry.get("foreign_keys", []):
        ta, ca = resolve(a)
        tb, cb = resolve(b)
        fks.append((SchemaElementId(table_names[ta], ca), SchemaElementId(table_names[tb], cb)))
    return SchemaCatalog(db_id=db_id, tables=tuple(tables), foreign_keys=tuple(fks))


def load_dataset_catalogs(path: str | Path) -> list[SchemaCatalog]:
    """Read a ``tables.json``-layout schema file (Spider / Bird)."""
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CatalogParseError(f"malformed schema file {path}: {exc.msg}", offset) from exc
    if not isinstance(entries, list):
        raise CatalogParseError(f"schema file {path} must hold a JSON array", 0)

    catalogs, seen = [], set()
    for entry in entries:
        db_id = entry.get("db_id")
        if db_id in seen:
            raise CatalogError(f"duplicate db_id {db_id!r} in {path}")
        seen.add(db_id)
        catalogs.append(_build_from_entry(entry))
    return catalogs


def connect_readonly(db_file: str | Path) -> sqlite3.Connection:
    path = Path(db_file)
    if not path.is_file():
        raise CatalogIOError(f"database file not found: {path}")
    try:
        conn = sqlite3.connect(f"{path.resolve().as_uri()}?mode=ro", uri=True, check_same_thread=False)
        conn.execute("PRAGMA query_only = 1")
        conn.execute("SELECT name FROM sqlite_master LIMIT 1").fetchall()
    except sqlite3.DatabaseError as exc:
        raise CatalogIOError(f"cannot read database {path}: {exc}") from exc
    return conn


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def introspect_database(db_file: str | Path, db_id: str | None = None) -> SchemaCatalog:
    """Build a catalog from a live SQLite file, with up to 3 sample values per column."""
    conn = connect_readonly(db_file)
    try:
        try:
            names = [
                r[0]
                for r in conn.execute(
                    "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
                )
            ]
            tables, raw_fks = [], []
            for tname in names:
                info = conn.execute(f"PRAGMA table_info({_quote(tname)})").fetchall()
                cols, pk = [], []
                for _cid, cname, ctype, _notnull, _default, pk_pos in info:
                    rows = conn.execute(
                        f"SELECT DISTINCT {_quote(cname)} FROM {_quote(tname)} "
                        f"WHERE {_quote(cname)} IS NOT NULL LIMIT {SAMPLE_LIMIT}"
                    ).fetchall()
                    cols.append(
                        ColumnSchema(
                            name=cname,
                            display_name=cname,
                            value_type=normalize_value_type(ctype),
                            sample_values=tuple(str(r[0]) for r in rows),
                        )
                    )
                    if pk_pos:
                        pk.append((pk_pos, cname))
                tables.append(
                    TableSchema(name=tname, columns=tuple(cols), primary_key=tuple(c for _, c in sorted(pk)), display_name=tname)
                )
                for row in conn.execute(f"PRAGMA foreign_key_list({_quote(tname)})"):
                    raw_fks.append((tname, row[3], row[2], row[4]))
        except sqlite3.DatabaseError as exc:
            raise CatalogIOError(f"cannot introspect {db_file}: {exc}") from exc
    finally:
        conn.close()

    if not tables:
        raise CatalogError(f"database {db_file} has no user tables")
    by_name = {t.name: t for t in tables}
    fks = []
    for src_table, src_col, dst_table, dst_col in raw_fks:
        dst = by_name.get(normalize_identifier(dst_table))
        if dst is not None and dst_col is None and len(dst.primary_key) == 1:
            dst_col = dst.primary_key[0]
        a = SchemaElementId(src_table, src_col)
        if dst is None or dst_col is None:
            log.warning("dropping unresolvable foreign key %s -> %s.%s", a, dst_table, dst_col)
            continue
        b = SchemaElementId(dst_table, dst_col)
        if not (by_name[a.table].has_column(a.column) and dst.has_column(b.column)):
            log.warning("dropping unresolvable foreign key %s -> %s", a, b)
            continue
        fks.append((a, b))
    return SchemaCatalog(db_id=db_id or Path(db_file).stem, tables=tuple(tables), foreign_keys=tuple(fks))


def attach_samples(catalog: SchemaCatalog, db_file: str | Path) -> SchemaCatalog:
    """Copy of ``catalog`` with sample values read from the live database.

    Columns missing from the database keep their current samples.
    """
    live = introspect_database(db_file, catalog.db_id)
    tables = []
    for t in catalog.tables:
        lt = live.table(t.name) if live.has_table(t.name) else None
        cols = tuple(
            replace(c, sample_values=lt.column(c.name).sample_values) if lt is not None and lt.has_column(c.name) else c
            for c in t.columns
        )
        tables.append(replace(t, columns=cols))
    return replace(catalog, tables=tuple(tables))


def subset_catalog(catalog: SchemaCatalog, keep: SchemaSet) -> SchemaCatalog:
    """Restrict ``catalog`` to exactly the elements of ``keep``.

    Order is preserved; foreign keys lose any edge with a dropped endpoint.
    """
    if not keep:
        raise CatalogError("cannot subset a catalog to the empty schema set")
    keep.validate(catalog)
    tables = []
    for t in catalog.tables:
        if SchemaElementId(t.name) not in keep:
            continue
        cols = tuple(c for c in t.columns if SchemaElementId(t.name, c.name) in keep)
        kept = {c.name for c in cols}
        tables.append(
            TableSchema(
                name=t.name,
                columns=cols,
                primary_key=tuple(c for c in t.primary_key if c in kept),
                display_name=t.display_name,
            )
        )
    fks = tuple((a, b) for a, b in catalog.foreign_keys if a in keep and b in keep)
    return SchemaCatalog(db_id=catalog.db_id, tables=tuple(tables), foreign_keys=fks, require_columns=False)


def full_set(catalog: SchemaCatalog) -> SchemaSet:
    return catalog.elements()


def _ddl_block(catalog: SchemaCatalog, t: TableSchema) -> str:
    lines = []
    for c in t.columns:
        line = f"  {c.display_name} {c.value_type}"
        if c.sample_values:
            line += " -- e.g. " + ", ".join(c.sample_values)
        lines.append(line)
    body = list(lines)
    if t.primary_key:
        pk = ", ".join(t.column(c).display_name for c in t.primary_key)
        body.append(f"  PRIMARY KEY ({pk})")
    for a, b in catalog.foreign_keys:
        if a.table == t.name:
            src = t.column(a.column).display_name
            dst_t = catalog.table(b.table)
            body.append(f"  FOREIGN KEY ({src}) REFERENCES {dst_t.display_name}({dst_t.column(b.column).display_name})")
    # comments must not swallow separators, so commas go before any comment
    rendered = []
    for i, ln in enumerate(body):
        sep = "," if i < len(body) - 1 else ""
        if " -- " in ln:
            code, comment = ln.split(" -- ", 1)
            rendered.append(f"{code}{sep} -- {comment}")
        else:
            rendered.append(ln + sep)
    return f"CREATE TABLE {t.display_name} (\n" + "\n".join(rendered) + "\n);"


def serialize_schema(catalog: SchemaCatalog, style: str = "ddl") -> str:
    if style == "compact":
        return "\n".join(f"{t.display_name}({', '.join(c.display_name for c in t.columns)})" for t in catalog.tables)
    if style == "ddl":
        return "\n\n".join(_ddl_block(catalog, t) for t in catalog.tables)
    raise ValueError(f"unknown schema style {style!r}")


def catalogs_by_id(catalogs: Iterable[SchemaCatalog]) -> dict[str, SchemaCatalog]:
    return {c.db_id: c for c in catalogs}


def catalog_to_entry(catalog: SchemaCatalog) -> dict:
    """Inverse of the ``tables.json`` loader for one database."""
    col_names = [[-1, "*"]]
    col_display = [[-1, "*"]]
    col_types = ["text"]
    samples: list[list[str]] = [[]]
    index = {}
    for j, t in enumerate(catalog.tables):
        for c in t.columns:
            index[(t.name, c.name)] = len(col_names)
            col_names.append([j, c.display_name])
            col_display.append([j, c.description or c.display_name])
            col_types.append(c.value_type if c.value_type != "other" else "others")
            samples.append(list(c.sample_values))
    pks = []
    for t in catalog.tables:
        ids = [index[(t.name, c)] for c in t.primary_key]
        if len(ids) == 1:
            pks.append(ids[0])
        elif ids:
            pks.append(ids)
    entry = {
        "db_id": catalog.db_id,
        "table_names_original": [t.display_name for t in catalog.tables],
        "table_names": [t.display_name for t in catalog.tables],
        "column_names_original": col_names,
        "column_names": col_display,
        "column_types": col_types,
        "primary_keys": pks,
        "foreign_keys": [[index[(a.table, a.column)], index[(b.table, b.column)]] for a, b in catalog.foreign_keys],
    }
    if any(samples):
        entry["sample_values"] = samples  # extension key, ignored by other tools
    return entry


@dataclass(frozen=True)
class ScoredElement:
    """A schema element with the score one scorer assigned to it."""

    element: SchemaElementId
    score: float
    space: str
