import json
import sqlite3

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schemalink.catalog import (
    CatalogError,
    CatalogIOError,
    CatalogParseError,
    ColumnSchema,
    SchemaCatalog,
    SchemaElementId,
    SchemaSet,
    TableSchema,
    attach_samples,
    catalog_to_entry,
    full_set,
    introspect_database,
    load_dataset_catalogs,
    normalize_value_type,
    serialize_schema,
    subset_catalog,
)

from fixtures_data import CONCERT_ENTRY


def test_load_counts_tables_and_columns(tables_file):
    entry = {
        "db_id": "mini",
        "table_names_original": ["singer", "concert"],
        "column_names_original": [[-1, "*"], [0, "singer_id"], [0, "name"], [0, "age"], [1, "concert_id"], [1, "singer_id"]],
        "column_types": ["text", "number", "text", "number", "number", "number"],
        "primary_keys": [1, 4],
        "foreign_keys": [[5, 1]],
    }
    tables_file.write_text(json.dumps([entry]))
    (cat,) = load_dataset_catalogs(tables_file)
    assert len(cat.tables) == 2
    assert sum(len(t.columns) for t in cat.tables) == 5
    assert cat.foreign_keys == ((SchemaElementId("concert", "singer_id"), SchemaElementId("singer", "singer_id")),)


def test_load_concert_fixture(concert):
    assert [t.name for t in concert.tables] == ["stadium", "singer", "concert", "singer_in_concert"]
    assert concert.table("singer_in_concert").primary_key == ("concert_id", "singer_id")
    assert concert.table("singer").column("name").display_name == "Name"
    assert concert.table("singer").column("is_male").value_type == "other"


def test_empty_table_list_rejected(tables_file):
    tables_file.write_text(json.dumps([{**CONCERT_ENTRY, "table_names_original": [], "column_names_original": [[-1, "*"]],
                                        "primary_keys": [], "foreign_keys": []}]))
    with pytest.raises(CatalogError):
        load_dataset_catalogs(tables_file)


def test_fk_index_out_of_range(tables_file):
    tables_file.write_text(json.dumps([{**CONCERT_ENTRY, "foreign_keys": [[13, 99]]}]))
    with pytest.raises(CatalogError, match="out of range"):
        load_dataset_catalogs(tables_file)


def test_duplicate_db_id(tables_file):
    tables_file.write_text(json.dumps([CONCERT_ENTRY, CONCERT_ENTRY]))
    with pytest.raises(CatalogError, match="duplicate"):
        load_dataset_catalogs(tables_file)


def test_malformed_file_reports_byte_offset(tables_file):
    tables_file.write_text('[{"db_id": "é", ')
    with pytest.raises(CatalogParseError) as info:
        load_dataset_catalogs(tables_file)
    # the 'é' takes two bytes, so the byte offset is one past the char offset
    assert info.value.offset == len('[{"db_id": "é", '.encode())


def test_duplicate_column_case_insensitive():
    with pytest.raises(CatalogError):
        TableSchema("t", (ColumnSchema("Name"), ColumnSchema("name")))


def test_duplicate_table_case_insensitive():
    t = TableSchema("T", (ColumnSchema("a"),))
    with pytest.raises(CatalogError):
        SchemaCatalog("db", (t, TableSchema("t", (ColumnSchema("b"),))))


def test_table_without_columns_rejected():
    with pytest.raises(CatalogError):
        SchemaCatalog("db", (TableSchema("t", ()),))


@pytest.mark.parametrize("raw, expected", [
    ("VARCHAR(255)", "text"), ("int", "number"), ("DOUBLE PRECISION", "number"), ("datetime", "time"),
    ("bool", "boolean"), ("blob", "other"), (None, "other"), ("others", "other"),
])
def test_value_types(raw, expected):
    assert normalize_value_type(raw) == expected


def test_introspect_toy_db(tmp_path):
    db = tmp_path / "toy.sqlite"
    conn = sqlite3.connect(db)
    conn.executescript("CREATE TABLE t1 (a INTEGER PRIMARY KEY, b TEXT); CREATE TABLE t2 (c INTEGER REFERENCES t1(a));"
                       "INSERT INTO t1 VALUES (1, 'x'), (2, 'y'), (3, 'y'), (4, 'z'), (5, NULL);")
    conn.close()
    cat = introspect_database(db)
    assert cat.db_id == "toy"
    assert [(t.name, [c.name for c in t.columns]) for t in cat.tables] == [("t1", ["a", "b"]), ("t2", ["c"])]
    b = cat.table("t1").column("b")
    assert len(b.sample_values) == 3 and len(set(b.sample_values)) == 3
    assert cat.table("t2").column("c").sample_values == ()
    assert cat.foreign_keys == ((SchemaElementId("t2", "c"), SchemaElementId("t1", "a")),)


def test_introspect_rejects_empty_db(tmp_path):
    db = tmp_path / "empty.sqlite"
    sqlite3.connect(db).close()
    with pytest.raises(CatalogError):
        introspect_database(db)


def test_introspect_unreadable(tmp_path):
    bad = tmp_path / "bad.sqlite"
    bad.write_bytes(b"this is not a database file at all" * 10)
    with pytest.raises(CatalogIOError):
        introspect_database(bad)
    with pytest.raises(CatalogIOError):
        introspect_database(tmp_path / "missing.sqlite")


def test_attach_samples_and_round_trip(concert, concert_db, tmp_path):
    enriched = attach_samples(concert, concert_db)
    assert enriched.table("singer").column("country").sample_values
    p = tmp_path / "rt.json"
    p.write_text(json.dumps([catalog_to_entry(enriched)]))
    assert load_dataset_catalogs(p)[0] == enriched


def test_subset_identity(concert):
    assert subset_catalog(concert, full_set(concert)) == concert


def test_subset_one_column(toy):
    sub = subset_catalog(toy, SchemaSet(["t1", "t1.a"]))
    assert [t.name for t in sub.tables] == ["t1"]
    assert [c.name for c in sub.tables[0].columns] == ["a"]
    assert sub.foreign_keys == ()


def test_subset_errors(toy):
    with pytest.raises(CatalogError):
        subset_catalog(toy, SchemaSet(["t9"]))
    with pytest.raises(CatalogError):
        subset_catalog(toy, SchemaSet())


def test_compact_serialization():
    cat = SchemaCatalog("db", (TableSchema("t1", (ColumnSchema("a"), ColumnSchema("b"))),))
    assert serialize_schema(cat, "compact") == "t1(a, b)"


def test_ddl_serialization_golden(toy):
    assert serialize_schema(toy, "ddl") == (
        "CREATE TABLE t1 (\n  a number,\n  b text,\n  PRIMARY KEY (a)\n);\n\n"
        "CREATE TABLE t2 (\n  c number,\n  FOREIGN KEY (c) REFERENCES t1(a)\n);"
    )
    assert serialize_schema(toy, "ddl") == serialize_schema(toy, "ddl")


def test_ddl_sample_comment_keeps_separators(concert, concert_db):
    text = serialize_schema(attach_samples(concert, concert_db), "ddl")
    assert "  Name text, -- e.g. " in text
    assert "FOREIGN KEY (Stadium_ID) REFERENCES stadium(Stadium_ID)" in text


def test_schema_set_closure_and_projections():
    s = SchemaSet(["t1.a", "T2.C"])
    assert set(s.to_strings()) == {"t1", "t1.a", "t2", "t2.c"}
    assert s.table_level() == SchemaSet(["t1", "t2"])
    assert s.column_level() == {SchemaElementId("t1", "a"), SchemaElementId("t2", "c")}
    assert "t1.a" in s and "T1" in s


def test_schema_set_validate(toy):
    SchemaSet(["t1.a"]).validate(toy)
    with pytest.raises(CatalogError):
        SchemaSet(["t1.zz"]).validate(toy)


# property tests ---------------------------------------------------------------

names = st.sampled_from(["a", "b", "c", "d"])
tables = st.sampled_from(["t1", "t2", "t3"])
elements = st.builds(lambda t, c: f"{t}.{c}" if c else t, tables, st.one_of(st.none(), names))


@given(st.lists(elements, max_size=10), st.lists(elements, max_size=10))
def test_schema_set_algebra_preserves_closure(xs, ys):
    a, b = SchemaSet(xs), SchemaSet(ys)
    for s in (a | b, a & b, a - b):
        for e in s:
            assert e.owner() in s
        assert s.table_level().elements | s.column_level() == s.elements
        assert not (s.table_level().elements & s.column_level())


@st.composite
def catalogs(draw):
    n_tables = draw(st.integers(1, 4))
    tabs = []
    for i in range(n_tables):
        cols = draw(st.lists(names, min_size=1, max_size=4, unique=True))
        tabs.append(TableSchema(f"t{i}", tuple(ColumnSchema(c) for c in cols)))
    return SchemaCatalog("db", tuple(tabs))


@settings(max_examples=60)
@given(catalogs(), st.data())
def test_subset_elements_equal_keep(cat, data):
    all_elems = sorted(full_set(cat), key=SchemaElementId.sort_key)
    keep = SchemaSet(data.draw(st.lists(st.sampled_from(all_elems), min_size=1, max_size=8)))
    sub = subset_catalog(cat, keep)
    assert full_set(sub) == keep
    assert subset_catalog(cat, full_set(cat)) == cat
    assert serialize_schema(sub) == serialize_schema(sub)
