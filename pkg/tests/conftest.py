import json

import pytest

from fixtures_data import CONCERT_ENTRY, build_concert_db
from schemalink.catalog import ColumnSchema, SchemaCatalog, TableSchema, load_dataset_catalogs
from schemalink.synthetic import write_dataset


@pytest.fixture
def tables_file(tmp_path):
    p = tmp_path / "tables.json"
    p.write_text(json.dumps([CONCERT_ENTRY]))
    return p


@pytest.fixture
def concert(tables_file):
    return load_dataset_catalogs(tables_file)[0]


@pytest.fixture
def concert_db(tmp_path):
    return build_concert_db(tmp_path / "concert.sqlite")


@pytest.fixture
def toy():
    """t1(a, b) and t2(c), with t2.c -> t1.a."""
    t1 = TableSchema("t1", (ColumnSchema("a", value_type="number"), ColumnSchema("b", value_type="text")), ("a",))
    t2 = TableSchema("t2", (ColumnSchema("c", value_type="number"),))
    from schemalink.catalog import SchemaElementId

    return SchemaCatalog("toy", (t1, t2), ((SchemaElementId("t2", "c"), SchemaElementId("t1", "a")),))


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("synthetic"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
