"""The chain loop: union the granularity scorers' outputs, shrink, repeat."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from .catalog import SchemaCatalog, SchemaElementId, SchemaSet, full_set, subset_catalog
from .data import Instance

log = logging.getLogger(__name__)

SCORER_NAMES = ("column", "table", "database")
DEFAULT_PLAN = (frozenset(SCORER_NAMES), frozenset({"table", "database"}))


class CycleError(RuntimeError):
    def __init__(self, message: str, trace: CycleTrace | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ScorerOutput:
    schema: SchemaSet
    scores: dict[SchemaElementId, float] = field(default_factory=dict)
    annotation: str | None = None


class Scorer(Protocol):
    def __call__(self, instance: Instance, catalog: SchemaCatalog) -> ScorerOutput: ...


@dataclass(frozen=True)
class CycleConfig:
    num_cycles: int = 2
    plan: tuple[frozenset[str], ...] = DEFAULT_PLAN

    def __post_init__(self):
        if self.num_cycles < 1:
            raise ValueError("num_cycles must be >= 1")
        if not self.plan:
            raise ValueError("cycle plan is empty")
        for enabled in self.plan:
            if not enabled:
                raise ValueError("every cycle needs at least one scorer")
            bad = set(enabled) - set(SCORER_NAMES)
            if bad:
                raise ValueError(f"unknown scorers {sorted(bad)}")

    @classmethod
    def uniform(cls, num_cycles: int, scorers: Sequence[str]) -> CycleConfig:
        """Same scorer set in every cycle."""
        return cls(num_cycles, (frozenset(scorers),))

    def scorers_for(self, cycle: int) -> list[str]:
        """Enabled scorers of 1-based ``cycle``; the last plan entry repeats."""
        enabled = self.plan[min(cycle, len(self.plan)) - 1]
        return [s for s in SCORER_NAMES if s in enabled]


@dataclass
class CycleRecord:
    cycle: int
    input: SchemaSet
    outputs: dict[str, SchemaSet]
    union: SchemaSet
    fallback: bool = False
    errors: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def recomputed_union(self) -> SchemaSet:
        out = SchemaSet()
        for s in self.outputs.values():
            out = out | s
        return out

    def to_record(self, include_timing: bool = True) -> dict:
        rec = {
            "cycle": self.cycle,
            "input": self.input.to_strings(),
            "outputs": {k: v.to_strings() for k, v in self.outputs.items()},
            "union": self.union.to_strings(),
            "fallback": self.fallback,
            "errors": dict(self.errors),
            "warnings": list(self.warnings),
        }
        if include_timing:
            rec["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        return rec


@dataclass
class CycleTrace:
    instance_id: str
    cycles: list[CycleRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def final(self) -> SchemaSet | None:
        return self.cycles[-1].union if self.cycles else None

    def to_record(self, include_timing: bool = True) -> dict:
        rec = {"id": self.instance_id, "cycles": [c.to_record(include_timing) for c in self.cycles]}
        if self.error:
            rec["error"] = self.error
        return rec

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_record(include_timing), sort_keys=True)


def _fallback(current: SchemaSet, sub: SchemaCatalog, column_scores: Mapping[SchemaElementId, float]) -> SchemaSet:
    """The single best table (by its best column score) with its current columns."""
    best = sub.tables[0].name
    if column_scores:
        table_score: dict[str, float] = {}
        for e, s in column_scores.items():
            if e.table in table_score:
                table_score[e.table] = max(table_score[e.table], s)
            else:
                table_score[e.table] = s
        ranked = [t.name for t in sub.tables if t.name in table_score]
        if ranked:
            best = max(ranked, key=lambda t: table_score[t])  # max keeps the first on ties
    return SchemaSet([e for e in current if e.table == best])


def run_cycle(
    instance: Instance,
    current: SchemaSet,
    catalog: SchemaCatalog,
    scorers: Mapping[str, Scorer],
    enabled: Sequence[str],
    cycle: int = 1,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[SchemaSet, CycleRecord]:
    if not current:
        raise ValueError("cycle input is empty")
    current.validate(catalog)
    missing = [s for s in enabled if s not in scorers]
    if missing:
        raise ValueError(f"no scorer configured for {missing}")
    sub = subset_catalog(catalog, current)
    record = CycleRecord(cycle, current, {}, SchemaSet())
    column_scores: dict[SchemaElementId, float] = {}

    for name in enabled:
        start = clock()
        try:
            out = scorers[name](instance, sub)
        except Exception as exc:  # a failing scorer must not sink the cycle
            log.warning("scorer %s failed on %s: %s", name, instance.id, exc)
            record.errors[name] = f"{type(exc).__name__}: {exc}"
            continue
        finally:
            record.timings[name] = clock() - start
        got = out.schema & current
        if got != out.schema:
            record.warnings.append(f"{name}: {len(out.schema - current)} elements outside the cycle input ignored")
        if out.annotation:
            record.warnings.append(f"{name}: {out.annotation}")
        if name == "column":
            column_scores = {e: s for e, s in out.scores.items() if e in current}
        record.outputs[name] = got

    if len(record.errors) == len(enabled):
        raise CycleError(f"all scorers failed in cycle {cycle} for {instance.id}")
    union = record.recomputed_union()
    if not union:
        union = _fallback(current, sub, column_scores)
        record.fallback = True
    record.union = union
    return union, record


def run_chain(
    instance: Instance,
    catalog: SchemaCatalog,
    scorers: Mapping[str, Scorer],
    config: CycleConfig = CycleConfig(),
) -> tuple[SchemaSet, CycleTrace]:
    trace = CycleTrace(instance.id)
    current = full_set(catalog)
    for k in range(1, config.num_cycles + 1):
        try:
            current, record = run_cycle(instance, current, catalog, scorers, config.scorers_for(k), k)
        except CycleError as exc:
            trace.error = str(exc)
            exc.trace = trace
            raise
        trace.cycles.append(record)
    return current, trace


# ----------------------------------------------------------------------------
# adapters from the scorer modules to the Scorer protocol

class ColumnScorer:
    def __init__(self, embedder, threshold: float = 0.5):
        self.embedder, self.threshold = embedder, threshold

    def __call__(self, instance: Instance, catalog: SchemaCatalog) -> ScorerOutput:
        from .embedder import score_and_filter_columns

        scored, kept = score_and_filter_columns(self.embedder, instance, catalog, self.threshold)
        return ScorerOutput(kept, {s.element: s.score for s in scored})


class TableScorer:
    def __init__(self, params, provider, rule=None):
        from .crossenc import SelectionRule

        self.params, self.provider, self.rule = params, provider, rule or SelectionRule()

    def __call__(self, instance: Instance, catalog: SchemaCatalog) -> ScorerOutput:
        from .crossenc import predict_table_level

        pred = predict_table_level(self.params, self.provider, instance, catalog, self.rule)
        return ScorerOutput(pred.d_f_t, dict(pred.score_cl))


class DatabaseScorer:
    def __init__(self, client, retries: int = 2):
        self.client, self.retries = client, retries

    def __call__(self, instance: Instance, catalog: SchemaCatalog) -> ScorerOutput:
        from .llmlink import link_database_level

        link = link_database_level(self.client, instance, catalog, self.retries)
        note = link.annotation
        if link.attempts > 1 and note is None:
            note = f"{link.attempts - 1} re-asks"
        if link.dropped:
            note = (note + "; " if note else "") + f"{link.dropped} unknown names dropped"
        return ScorerOutput(link.schema, {}, note)
