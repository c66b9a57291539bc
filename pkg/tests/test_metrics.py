import sqlite3

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schemalink.catalog import SchemaSet
from schemalink.metrics import (
    DatasetError,
    ExecOutcome,
    aggregate_em,
    aggregate_exec,
    execution_accuracy,
    exact_match,
    linking_metrics,
    linking_row,
    render_markdown,
    results_equal,
    valid_efficiency_score,
)

from fixtures_data import EX_PAIRS


# linking ---------------------------------------------------------------------

def test_perfect_prediction():
    golds = [SchemaSet(["t1.a"]), SchemaSet(["t2.c", "t1.b"])]
    for level in ("table", "column"):
        r = linking_metrics(golds, golds, level)
        assert (r.ma, r.ia, r.re) == (1.0, 1.0, 0.0)


def test_one_redundant_column():
    r = linking_metrics([SchemaSet(["t1.a", "t1.b"])], [SchemaSet(["t1.a"])], "column")
    assert (r.ma, r.ia, r.re) == (0.0, 1.0, 0.5)
    t = linking_metrics([SchemaSet(["t1.a", "t1.b"])], [SchemaSet(["t1.a"])], "table")
    assert (t.ma, t.ia, t.re) == (1.0, 1.0, 0.0)


def test_whole_database_prediction_pattern():
    everything = SchemaSet(["t1.a", "t1.b", "t2.c", "t3.d"])
    golds = [SchemaSet(["t1.a"]), SchemaSet(["t2.c"]), SchemaSet(["t1.b", "t3.d"])]
    r = linking_metrics([everything] * 3, golds, "table")
    assert r.ia == 1.0 and r.re > 0.5 and r.ma == 0.0


def test_empty_prediction_counts_zero_redundancy():
    r = linking_metrics([SchemaSet(), SchemaSet(["t1.a", "t1.b"])], [SchemaSet(["t1.a"])] * 2, "column")
    assert r.re == pytest.approx(0.25)
    assert r.ia == 0.5


def test_linking_errors():
    with pytest.raises(ValueError):
        linking_metrics([SchemaSet()], [], "table")
    with pytest.raises(ValueError):
        linking_metrics([], [], "table")
    with pytest.raises(ValueError):
        linking_metrics([SchemaSet()], [SchemaSet()], "row")


def _naive(preds, golds, level):
    def proj(s):
        out = set()
        for x in s.to_strings():
            is_col = "." in x
            if (level == "column") == is_col:
                out.add(x)
        return out

    n = len(preds)
    ma = sum(1 for p, g in zip(preds, golds) if proj(p) == proj(g)) / n
    ia = sum(1 for p, g in zip(preds, golds) if all(e in proj(p) for e in proj(g))) / n
    re = 0.0
    for p, g in zip(preds, golds):
        pp, gg = proj(p), proj(g)
        if pp:
            re += len([e for e in pp if e not in gg]) / len(pp)
    return ma, ia, re / n


elements = st.sampled_from(["t1.a", "t1.b", "t1.c", "t2.a", "t2.d", "t3.e", "t3.f", "t1"])
sets = st.lists(elements, max_size=8).map(SchemaSet)


@settings(max_examples=200)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.lists(sets, min_size=n, max_size=n),
                                                     st.lists(sets, min_size=n, max_size=n))),
       st.sampled_from(["table", "column"]))
def test_matches_bruteforce_oracle(pair, level):
    preds, golds = pair
    r = linking_metrics(preds, golds, level)
    ma, ia, re = _naive(preds, golds, level)
    assert r.ma == pytest.approx(ma) and r.ia == pytest.approx(ia) and r.re == pytest.approx(re)
    assert r.ma <= r.ia
    assert 0.0 <= r.re <= 1.0
    all_inside = all(set(map(str, p.column_level() if level == "column" else p.table_level()))
                     <= set(map(str, g.column_level() if level == "column" else g.table_level()))
                     for p, g in zip(preds, golds))
    assert (r.re == 0) == all_inside


def test_linking_row_scaling():
    row = linking_row("chain", 1, [SchemaSet(["t1.a", "t1.b"])], [SchemaSet(["t1.a"])])
    assert row["column"] == {"MA": 0.0, "IA": 100.0, "RE": 50.0}
    assert "| chain | 1 | 1 |" in render_markdown({"rows": [row]})


# execution -------------------------------------------------------------------

@pytest.fixture
def toy_db(tmp_path):
    p = tmp_path / "toy.sqlite"
    conn = sqlite3.connect(p)
    conn.executescript("CREATE TABLE t1 (a INTEGER, b TEXT); INSERT INTO t1 VALUES (1,'x'),(2,'y'),(3,'y');")
    conn.close()
    return p


def test_identical_and_qualified(toy_db):
    assert execution_accuracy(toy_db, "SELECT a FROM t1", "SELECT a FROM t1").flag == 1
    assert execution_accuracy(toy_db, "SELECT a FROM t1", "SELECT t1.a FROM t1").flag == 1
    assert execution_accuracy(toy_db, "SELECT a FROM t1 WHERE b = 'x'", "SELECT a FROM t1 WHERE b = 'y'").flag == 0


@pytest.mark.parametrize("pred, gold, flag", EX_PAIRS)
def test_ex_fixtures(concert_db, pred, gold, flag):
    assert execution_accuracy(concert_db, pred, gold).flag == flag


def test_order_matters_only_with_gold_order_by(toy_db):
    assert execution_accuracy(toy_db, "SELECT a FROM t1 ORDER BY a DESC", "SELECT a FROM t1").flag == 1
    assert execution_accuracy(toy_db, "SELECT a FROM t1 ORDER BY a DESC", "SELECT a FROM t1 ORDER BY a").flag == 0


def test_multiset_not_set(toy_db):
    assert execution_accuracy(toy_db, "SELECT DISTINCT b FROM t1", "SELECT b FROM t1").flag == 0


def test_prediction_failures_are_zero(toy_db):
    for pred in ["", None, "SELECT nope FROM t1", "SELEC a"]:
        out = execution_accuracy(toy_db, pred, "SELECT a FROM t1")
        assert out.flag == 0 and out.error


def test_prediction_cannot_write(toy_db):
    out = execution_accuracy(toy_db, "DELETE FROM t1", "SELECT a FROM t1")
    assert out.flag == 0
    assert sqlite3.connect(toy_db).execute("SELECT count(*) FROM t1").fetchone()[0] == 3


def test_prediction_timeout(toy_db):
    slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c"
    out = execution_accuracy(toy_db, slow, "SELECT a FROM t1", timeout=0.2)
    assert out.flag == 0 and "QueryTimeout" in out.error
    assert aggregate_exec([out], with_ves=False).timeouts == 1


def test_gold_failure_is_dataset_error(toy_db):
    with pytest.raises(DatasetError):
        execution_accuracy(toy_db, "SELECT a FROM t1", "SELECT ghost FROM t1")


def test_timed_outcome(toy_db):
    out = execution_accuracy(toy_db, "SELECT a FROM t1", "SELECT a FROM t1", runs=3)
    assert out.gold_time > 0 and out.pred_time > 0


def test_numeric_tolerance():
    assert results_equal([(1.0000000001,)], [(1.0,)], ordered=False)
    assert not results_equal([(1.001,)], [(1.0,)], ordered=False)
    assert results_equal([(None, "a")], [(None, "a")], ordered=True)
    assert not results_equal([("1",)], [(1,)], ordered=True)
    assert not results_equal([(None,)], [(0,)], ordered=True)


rows = st.lists(st.tuples(st.integers(-3, 3), st.sampled_from(["a", "b", None])), max_size=8)


@given(rows, st.randoms())
def test_row_permutation_invariance(rs, rnd):
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    assert results_equal(shuffled, rs, ordered=False)


# VES -------------------------------------------------------------------------

def test_ves_examples():
    assert valid_efficiency_score([0, 0], [None, None], [None, None]) == 0
    assert valid_efficiency_score([1], [0.5], [0.5]) == 1
    assert valid_efficiency_score([1], [2.0], [1.0]) == 2
    assert valid_efficiency_score([1, 0], [1.0, None], [4.0, None]) == pytest.approx(0.125)


def test_ves_zero_time_clamped():
    assert valid_efficiency_score([1], [0.0], [0.0]) == 1


def test_ves_requires_timings_for_correct():
    with pytest.raises(ValueError):
        valid_efficiency_score([1], [None], [1.0])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=10), st.floats(1e-4, 10))
def test_ves_equals_ex_with_unit_ratios(flags, t):
    outs = [ExecOutcome(f, t if f else None, t if f else None) for f in flags]
    rep = aggregate_exec(outs)
    assert rep.ves == pytest.approx(rep.ex)
    if rep.ex == 0:
        assert rep.ves == 0


# EM --------------------------------------------------------------------------

def test_em_examples():
    assert exact_match("SELECT a FROM t1", "SELECT a FROM t1") == 1
    assert exact_match("SELECT T.a FROM t1 AS T", "SELECT a FROM t1") == 1
    assert exact_match("SELEC a FROM", "SELECT a FROM t1") == 0
    assert exact_match(None, "SELECT a FROM t1") == 0
    with pytest.raises(DatasetError):
        exact_match("SELECT a FROM t1", "SELECT (")


def test_em_aggregate_counts_unparseable():
    rep = aggregate_em(["SELECT a FROM t1", "garbage (", None], ["SELECT a FROM t1"] * 3)
    assert rep.flags == [1, 0, 0] and rep.unparseable == 2
    assert rep.em == pytest.approx(1 / 3)
