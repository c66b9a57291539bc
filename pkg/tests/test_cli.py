import json
import sqlite3

import pytest

from schemalink.catalog import catalog_to_entry
from schemalink.cli import RunConfig, UsageError, build_parser, main
from schemalink.data import load_instances, write_jsonl
from schemalink.synthetic import mock_llm_script

from fixtures_data import CONCERT_ENTRY, build_concert_db


@pytest.fixture
def concert_dataset(tmp_path):
    root = tmp_path / "spider"
    (root / "database" / "concert_singer").mkdir(parents=True)
    build_concert_db(root / "database" / "concert_singer" / "concert_singer.sqlite")
    (root / "tables.json").write_text(json.dumps([CONCERT_ENTRY]))
    samples = [
        {"db_id": "concert_singer", "question": "How many singers are there?", "query": "SELECT count(*) FROM singer"},
        {"db_id": "concert_singer", "question": "Names of singers older than 40?", "evidence": "older means age",
         "query": "SELECT name FROM singer WHERE age > 40"},
        {"db_id": "concert_singer", "question": "Stadium capacities?", "query": "SELECT capacity FROM stadium"},
    ]
    (root / "dev.json").write_text(json.dumps(samples))
    return root


def _run(*argv):
    return main([str(a) for a in argv])


def test_ingest_three_samples(concert_dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert _run("ingest", concert_dataset, "--out", out) == 0
    insts = load_instances(out / "instances.jsonl")
    assert len(insts) == 3
    assert all(i.gold_schema is not None for i in insts)
    assert set(insts[0].gold_schema.to_strings()) == {"singer"}
    assert insts[0].evidence == "" and insts[1].evidence == "older means age"
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["instances"] == 3
    assert (out / "manifest.json").exists() and (out / "tables.json").exists()


def test_ingest_flags_bad_gold(concert_dataset, tmp_path):
    samples = json.loads((concert_dataset / "dev.json").read_text())
    samples.append({"db_id": "concert_singer", "question": "?", "query": "SELECT ghost FROM singer"})
    (concert_dataset / "dev.json").write_text(json.dumps(samples))
    out = tmp_path / "run"
    assert _run("ingest", concert_dataset, "--out", out) == 0
    insts = load_instances(out / "instances.jsonl")
    assert len(insts) == 4
    assert insts[3].gold_schema is None and insts[3].flags[0].startswith("gold_sql_unusable")


def test_ingest_unknown_db(concert_dataset, tmp_path, capsys):
    (concert_dataset / "dev.json").write_text(json.dumps([{"db_id": "nowhere", "question": "q", "query": "SELECT 1"}]))
    assert _run("ingest", concert_dataset, "--out", tmp_path / "run") == 1
    assert "nowhere" in capsys.readouterr().err


def test_ingest_is_idempotent(concert_dataset, tmp_path):
    out = tmp_path / "run"
    _run("ingest", concert_dataset, "--out", out)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    _run("ingest", concert_dataset, "--out", out)
    assert first == {p.name: p.read_bytes() for p in out.iterdir()}


def _manual_run(tmp_path, toy, pred_union, gen_sql=None):
    """A run directory with one instance (gold t1.a) and a hand-written trace."""
    run = tmp_path / "run"
    run.mkdir()
    db = tmp_path / "toy.sqlite"
    conn = sqlite3.connect(db)
    conn.executescript("CREATE TABLE t1 (a INTEGER PRIMARY KEY, b TEXT); CREATE TABLE t2 (c INTEGER);"
                       "INSERT INTO t1 VALUES (1, 'x'), (2, 'y');")
    conn.close()
    (run / "tables.json").write_text(json.dumps([catalog_to_entry(toy)]))
    (run / "manifest.json").write_text(json.dumps({"db_files": {"toy": str(db)}}))
    write_jsonl(run / "instances.jsonl", [{"id": "0", "db_id": "toy", "question": "list a", "evidence": "",
                                          "gold_sql": "SELECT a FROM t1", "gold_schema": ["t1", "t1.a"]}])
    write_jsonl(run / "traces.jsonl", [{"id": "0", "cycles": [{"cycle": 1, "union": pred_union}]}])
    if gen_sql:
        write_jsonl(run / "generations.jsonl", [{"id": "0", "sql": gen_sql, "schema": pred_union}])
    return run


def test_evaluate_redundancy_fixture(tmp_path, toy):
    run = _manual_run(tmp_path, toy, ["t1", "t1.a", "t1.b"])
    assert _run("evaluate", "--out", run) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["rows"][0]["column"] == {"MA": 0.0, "IA": 100.0, "RE": 50.0}
    row = (run / "report.md").read_text().splitlines()[2]
    assert "| 0.00 | 100.00 | 50.00 |" in row


def test_evaluate_perfect_and_deterministic(tmp_path, toy):
    run = _manual_run(tmp_path, toy, ["t1", "t1.a"], gen_sql="SELECT t1.a FROM t1")
    assert _run("evaluate", "--out", run) == 0
    first = (run / "report.json").read_bytes(), (run / "report.md").read_bytes()
    row = json.loads(first[0])["rows"][0]
    assert row["table"] == row["column"] == {"MA": 100.0, "IA": 100.0, "RE": 0.0}
    assert row["EX"] == 100.0 and row["EM"] == 100.0
    assert json.loads((run / "timing.json").read_text())["VES"] > 0
    assert _run("evaluate", "--out", run) == 0
    assert first == ((run / "report.json").read_bytes(), (run / "report.md").read_bytes())


def test_evaluate_rejects_stray_ids(tmp_path, toy):
    run = _manual_run(tmp_path, toy, ["t1"])
    write_jsonl(run / "traces.jsonl", [{"id": "999", "cycles": []}])
    assert _run("evaluate", "--out", run) == 1


def test_link_requires_ingest(tmp_path, capsys):
    assert _run("link", "--out", tmp_path / "empty", "--scorers", "database") == 1
    assert "ingest" in capsys.readouterr().err


def test_link_needs_endpoint_or_mock(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    _run("ingest", corpus.root, "--out", out)
    assert _run("link", "--out", out, "--scorers", "database") == 1
    assert "LLM endpoint" in capsys.readouterr().err


def test_database_only_chain_with_mock(corpus, tmp_path):
    out = tmp_path / "run"
    script = tmp_path / "mock.json"
    script.write_text(json.dumps(mock_llm_script(corpus)))
    assert _run("ingest", corpus.root, "--out", out) == 0
    assert _run("link", "--out", out, "--scorers", "database", "--cycles", "2", "--mock-llm", script, "--jobs", "4") == 0
    assert _run("generate", "--out", out, "--mock-llm", script) == 0
    assert _run("evaluate", "--out", out, "--scorers", "database", "--cycles", "2") == 0
    rows = json.loads((out / "report.json").read_text())["rows"]
    assert [r["cycle"] for r in rows] == [1, 2]
    assert rows[0]["table"]["IA"] == 100.0 and rows[0]["table"]["RE"] > 0
    assert rows[1]["table"] == {"MA": 100.0, "IA": 100.0, "RE": 0.0}
    assert rows[1]["EX"] == 100.0


def test_config_rejects_unknown_and_secret_keys(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"api_key": "x"}))
    with pytest.raises(UsageError):
        RunConfig.load(str(p))
    with pytest.raises(UsageError):
        RunConfig.load(str(tmp_path / "missing.json"))


def test_no_secret_flags():
    text = build_parser().format_help()
    for action in build_parser()._subparsers._group_actions[0].choices.values():
        text += action.format_help()
    assert "key" not in text.lower() and "token" not in text.lower()


def test_training_commands_smoke(corpus, tmp_path):
    out = tmp_path / "run"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"embedder": {"epochs": 2, "dim": 16},
                               "crossenc": {"epochs": 1, "d_model": 8, "heads": 2, "token_dim": 8, "hidden": 8}}))
    assert _run("ingest", corpus.root, "--out", out) == 0
    assert _run("mine-triplets", "--out", out, "--config", cfg) == 0
    assert _run("train-embedder", "--out", out, "--config", cfg) == 0
    assert _run("train-crossenc", "--out", out, "--config", cfg) == 0
    assert (out / "embedder.ckpt").exists() and (out / "crossenc.ckpt").exists()
    assert _run("link", "--out", out, "--config", cfg, "--scorers", "column,table", "--cycles", "1") == 0
    assert _run("evaluate", "--out", out, "--config", cfg, "--scorers", "column,table", "--cycles", "1") == 0
    assert json.loads((out / "report.json").read_text())["method"] == "column+table"
