"""Linking metrics (MA / IA / RE) and generation metrics (EX / VES / EM)."""

from __future__ import annotations

import logging
import math
import sqlite3
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .catalog import SchemaSet, connect_readonly
from .sqlast import SqlParseError, ast_match, parse_sql

log = logging.getLogger(__name__)

LEVELS = ("table", "column")
REL_TOL = 1e-6
TIMER_RESOLUTION = max(time.get_clock_info("perf_counter").resolution, 1e-9)


class DatasetError(ValueError):
    """The gold side of an instance is broken (unparseable or failing SQL)."""


# ----------------------------------------------------------------------------
# schema linking

@dataclass(frozen=True)
class LinkingReport:
    level: str
    ma: float
    ia: float
    re: float
    n: int

    def scaled(self) -> dict:
        return {"MA": round(100 * self.ma, 2), "IA": round(100 * self.ia, 2), "RE": round(100 * self.re, 2)}


def project(s: SchemaSet, level: str) -> frozenset:
    if level == "table":
        return s.table_level().elements
    if level == "column":
        return s.column_level()
    raise ValueError(f"level must be one of {LEVELS}")


def linking_metrics(preds: Sequence[SchemaSet], golds: Sequence[SchemaSet], level: str) -> LinkingReport:
    """Per-instance exact match, inclusion and redundant fraction, averaged.

    An empty prediction contributes a redundancy of 0.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} gold sets")
    if not preds:
        raise ValueError("linking_metrics needs at least one instance")
    ma = ia = re_sum = 0.0
    for pred, gold in zip(preds, golds):
        p, g = project(pred, level), project(gold, level)
        ma += p == g
        ia += p >= g
        if p:
            re_sum += len(p - g) / len(p)
    n = len(preds)
    return LinkingReport(level, ma / n, ia / n, re_sum / n, n)


# ----------------------------------------------------------------------------
# execution

class QueryTimeout(RuntimeError):
    pass


def run_query(conn: sqlite3.Connection, sql: str, timeout: float = 30.0) -> list[tuple]:
    deadline = time.monotonic() + timeout
    conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 1000)
    try:
        return conn.execute(sql).fetchall()
    except sqlite3.OperationalError as exc:
        if "interrupted" in str(exc):
            raise QueryTimeout(f"query exceeded {timeout}s") from exc
        raise
    finally:
        conn.set_progress_handler(None, 0)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def cells_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if _is_number(a) and _is_number(b):
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=0.0)
    if _is_number(a) or _is_number(b):
        return False
    return a == b


def rows_equal(r1: tuple, r2: tuple) -> bool:
    return len(r1) == len(r2) and all(cells_equal(a, b) for a, b in zip(r1, r2))


def _sort_key(row: tuple):
    key = []
    for v in row:
        if v is None:
            key.append((0, 0, ""))
        elif _is_number(v):
            key.append((1, float(v), ""))
        elif isinstance(v, bytes):
            key.append((3, 0, v.hex()))
        else:
            key.append((2, 0, str(v)))
    return key


def results_equal(pred: list[tuple], gold: list[tuple], ordered: bool) -> bool:
    """Sequence comparison when ``ordered``, multiset comparison otherwise."""
    if len(pred) != len(gold):
        return False
    if ordered:
        return all(rows_equal(a, b) for a, b in zip(pred, gold))
    ps, gs = sorted(pred, key=_sort_key), sorted(gold, key=_sort_key)
    if all(rows_equal(a, b) for a, b in zip(ps, gs)):
        return True
    # tolerance can break the sort alignment; fall back to greedy matching
    left = list(gs)
    for row in ps:
        for i, cand in enumerate(left):
            if rows_equal(row, cand):
                del left[i]
                break
        else:
            return False
    return True


def paired_median_times(conn: sqlite3.Connection, gold_sql: str, pred_sql: str, runs: int,
                        timeout: float) -> tuple[float, float]:
    """Median wall time of each query over ``runs`` interleaved executions.

    One untimed warm-up run of each comes first, so neither query pays for
    a cold page cache alone.
    """
    run_query(conn, gold_sql, timeout)
    run_query(conn, pred_sql, timeout)
    gold, pred = [], []
    for _ in range(runs):
        for sql, bucket in ((gold_sql, gold), (pred_sql, pred)):
            start = time.perf_counter()
            run_query(conn, sql, timeout)
            bucket.append(time.perf_counter() - start)
    return (max(statistics.median(gold), TIMER_RESOLUTION), max(statistics.median(pred), TIMER_RESOLUTION))


@dataclass
class ExecOutcome:
    flag: int
    gold_time: float | None = None
    pred_time: float | None = None
    error: str | None = None

    @property
    def ratio(self) -> float:
        if not self.flag or self.gold_time is None or self.pred_time is None:
            return 0.0
        return self.gold_time / self.pred_time


def execution_accuracy(
    db_file: str | Path,
    pred_sql: str | None,
    gold_sql: str,
    timeout: float = 30.0,
    runs: int = 0,
) -> ExecOutcome:
    """Execute gold and prediction read-only and compare the results.

    With ``runs > 0`` correct predictions are also timed (median of ``runs``)
    for VES.  Gold failures raise ``DatasetError``; prediction failures give 0.
    """
    conn = connect_readonly(db_file)
    try:
        try:
            gold_ast = parse_sql(gold_sql)
            gold_rows = run_query(conn, gold_sql, timeout)
        except (SqlParseError, sqlite3.Error, QueryTimeout) as exc:
            raise DatasetError(f"gold SQL fails: {exc}") from exc
        if not pred_sql or not pred_sql.strip():
            return ExecOutcome(0, error="empty prediction")
        try:
            pred_rows = run_query(conn, pred_sql, timeout)
        except (sqlite3.Error, QueryTimeout, sqlite3.Warning) as exc:
            return ExecOutcome(0, error=f"{type(exc).__name__}: {exc}")
        flag = int(results_equal(pred_rows, gold_rows, gold_ast.has_top_level_order_by()))
        out = ExecOutcome(flag)
        if flag and runs > 0:
            out.gold_time, out.pred_time = paired_median_times(conn, gold_sql, pred_sql, runs, timeout)
        return out
    finally:
        conn.close()


def valid_efficiency_score(flags: Sequence[int], gold_times: Sequence[float | None], pred_times: Sequence[float | None]) -> float:
    """Mean over instances of flag * time(gold) / time(pred).

    Incorrect instances contribute 0; zero times are clamped to the timer
    resolution.
    """
    n = len(flags)
    if not (n == len(gold_times) == len(pred_times)):
        raise ValueError("flags and timings must align")
    if n == 0:
        raise ValueError("no instances")
    total = 0.0
    for f, tg, tp in zip(flags, gold_times, pred_times):
        if not f:
            continue
        if tg is None or tp is None:
            raise ValueError("correct instance without timings")
        total += max(tg, TIMER_RESOLUTION) / max(tp, TIMER_RESOLUTION)
    return total / n


@dataclass
class ExecReport:
    ex: float
    ves: float | None
    rows: list[ExecOutcome] = field(default_factory=list)
    timeouts: int = 0


def aggregate_exec(outcomes: Sequence[ExecOutcome], with_ves: bool = True) -> ExecReport:
    flags = [o.flag for o in outcomes]
    ex = sum(flags) / len(flags)
    ves = None
    if with_ves:
        ves = valid_efficiency_score(flags, [o.gold_time for o in outcomes], [o.pred_time for o in outcomes])
    timeouts = sum(1 for o in outcomes if o.error and "QueryTimeout" in o.error)
    return ExecReport(ex, ves, list(outcomes), timeouts)


# ----------------------------------------------------------------------------
# exact match

def exact_match(pred_sql: str | None, gold_sql: str) -> int:
    try:
        gold = parse_sql(gold_sql)
    except SqlParseError as exc:
        raise DatasetError(f"gold SQL does not parse: {exc}") from exc
    if not pred_sql:
        return 0
    try:
        pred = parse_sql(pred_sql)
    except SqlParseError:
        return 0
    return int(ast_match(pred, gold))


@dataclass
class EmReport:
    em: float
    flags: list[int]
    unparseable: int


def aggregate_em(preds: Sequence[str | None], golds: Sequence[str]) -> EmReport:
    flags, bad = [], 0
    for p, g in zip(preds, golds, strict=True):
        if p:
            try:
                parse_sql(p)
            except SqlParseError:
                bad += 1
        else:
            bad += 1
        flags.append(exact_match(p, g))
    return EmReport(sum(flags) / len(flags), flags, bad)


# ----------------------------------------------------------------------------
# reports

VES_NOTE = (
    "VES is the mean of time(gold)/time(pred) over correct instances (0 otherwise), "
    "unclamped and without the square root used by the official Bird script."
)


def linking_row(method: str, cycle: int | None, preds: Sequence[SchemaSet], golds: Sequence[SchemaSet]) -> dict:
    row = {"method": method, "cycle": cycle, "n": len(preds)}
    for level in LEVELS:
        row[level] = linking_metrics(preds, golds, level).scaled()
    return row


def render_markdown(report: dict) -> str:
    lines = [
        "| method | cycle | n | table MA | table IA | table RE | column MA | column IA | column RE | EX | EM |",
        "|---|---|---|---|---|---|---|---|---|---|---|",
    ]

    def fmt(v):
        return "-" if v is None else f"{v:.2f}"

    for r in report["rows"]:
        t, c = r["table"], r["column"]
        lines.append(
            f"| {r['method']} | {'-' if r['cycle'] is None else r['cycle']} | {r['n']} | "
            f"{fmt(t['MA'])} | {fmt(t['IA'])} | {fmt(t['RE'])} | {fmt(c['MA'])} | {fmt(c['IA'])} | {fmt(c['RE'])} | "
            f"{fmt(r.get('EX'))} | {fmt(r.get('EM'))} |"
        )
    return "\n".join(lines) + "\n"
