"""Batch entry points, one subcommand per lifecycle stage.

Every command works inside one run directory (``--out``): ``ingest`` fills
it, the others read what earlier stages left there.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from .catalog import (
    CatalogError,
    SchemaCatalog,
    SchemaSet,
    attach_samples,
    catalog_to_entry,
    catalogs_by_id,
    introspect_database,
    load_dataset_catalogs,
)
from .data import Instance, load_instances, read_jsonl, write_jsonl
from .sqlast import SqlParseError, gold_schema

log = logging.getLogger("schemalink")

INSTANCES = "instances.jsonl"
CATALOGS = "tables.json"
MANIFEST = "manifest.json"
TRIPLETS = "triplets.jsonl"
EMBEDDER = "embedder.ckpt"
CROSSENC = "crossenc.ckpt"
PREDICTIONS = "predictions.jsonl"
TRACES = "traces.jsonl"
GENERATIONS = "generations.jsonl"


class UsageError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    cycles: int = 2
    scorers: list[str] | None = None  # None = default per-cycle plan
    jobs: int = 1
    column_threshold: float = 0.5
    link_retries: int = 2
    embedder: dict = field(default_factory=dict)  # TripletTrainConfig fields, plus "remote": {url, model}
    crossenc: dict = field(default_factory=dict)  # CrossEncoderConfig / CrossTrainConfig fields
    encoder: dict = field(default_factory=dict)  # {"kind": "hash" | "remote", ...}
    llm: dict = field(default_factory=dict)  # LlmClientConfig fields
    rule: dict = field(default_factory=dict)  # SelectionRule fields
    ves_runs: int = 5
    exec_timeout: float = 30.0

    @classmethod
    def load(cls, path: str | None) -> RunConfig:
        if not path:
            return cls()
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {p} does not exist")
        raw = json.loads(p.read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)


def _pick(cls, values: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}


# ----------------------------------------------------------------------------
# shared loading

def _read_manifest(run: Path) -> dict:
    p = run / MANIFEST
    if not p.exists():
        raise UsageError(f"{run} has no {MANIFEST}; run `ingest` first")
    return json.loads(p.read_text(encoding="utf-8"))


def _load_run(run: Path) -> tuple[dict[str, SchemaCatalog], list[Instance], dict]:
    manifest = _read_manifest(run)
    catalogs = catalogs_by_id(load_dataset_catalogs(run / CATALOGS))
    instances = load_instances(run / INSTANCES)
    return catalogs, instances, manifest


def _usable(instances: list[Instance]) -> list[Instance]:
    return [i for i in instances if i.gold_schema is not None]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# ingest

def _find(dataset: Path, names: list[str]) -> Path | None:
    for n in names:
        if (dataset / n).exists():
            return dataset / n
    return None


def ingest(dataset_dir: str | Path, out: Path, split: str = "dev") -> dict:
    """Normalize a Spider/Bird-layout dataset into the run directory."""
    dataset = Path(dataset_dir)
    samples_file = _find(dataset, [f"{split}.json"])
    if samples_file is None:
        raise UsageError(f"{dataset} has no {split}.json")
    db_root = _find(dataset, ["database", f"{split}_databases"])
    tables_file = _find(dataset, ["tables.json", f"{split}_tables.json"])

    samples = json.loads(samples_file.read_text(encoding="utf-8"))
    db_ids = sorted({s["db_id"] for s in samples})
    db_files = {}
    if db_root is not None:
        for db_id in db_ids:
            f = db_root / db_id / f"{db_id}.sqlite"
            if f.exists():
                db_files[db_id] = str(f.resolve())
    if tables_file is not None:
        catalogs = catalogs_by_id(load_dataset_catalogs(tables_file))
        for db_id, f in db_files.items():
            if db_id in catalogs:
                catalogs[db_id] = attach_samples(catalogs[db_id], f)
    else:
        catalogs = {db_id: introspect_database(f, db_id) for db_id, f in db_files.items()}
    missing = [d for d in db_ids if d not in catalogs]
    if missing:
        raise UsageError(f"unresolvable db_id(s): {', '.join(missing)}")

    records, flagged = [], 0
    for n, s in enumerate(samples):
        sql = s.get("query") or s.get("SQL")
        ident = str(s.get("question_id", n))
        flags, gold = [], None
        if sql:
            try:
                gold = gold_schema(sql, catalogs[s["db_id"]])
            except (SqlParseError, CatalogError) as exc:
                flags.append(f"gold_sql_unusable: {exc}")
                flagged += 1
        inst = Instance(ident, s["db_id"], s["question"], s.get("evidence") or "", sql, gold, tuple(flags))
        records.append(inst.to_record())

    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / INSTANCES, records)
    used = [catalogs[d] for d in db_ids]
    (out / CATALOGS).write_text(json.dumps([catalog_to_entry(c) for c in used], indent=1) + "\n", encoding="utf-8")
    _write_json(out / MANIFEST, {"dataset": str(dataset.resolve()), "split": split, "db_files": db_files})
    return {"instances": len(records), "flagged": flagged, "databases": len(used)}


# ----------------------------------------------------------------------------
# training

def mine(out: Path, cfg: RunConfig) -> dict:
    from .embedder import mine_triplets

    catalogs, instances, _ = _load_run(out)
    rows = []
    for i in _usable(instances):
        for t in mine_triplets(i, i.gold_schema, catalogs[i.db_id], seed=cfg.seed):
            rows.append({"id": i.id, "anchor": t.anchor_text, "positive": t.positive_text,
                         "negative": t.negative_text, "pool": list(t.negative_pool)})
    write_jsonl(out / TRIPLETS, rows)
    return {"triplets": len(rows)}


def train_embedder_cmd(out: Path, cfg: RunConfig) -> dict:
    from .embedder import TripletExample, TripletTrainConfig, train_embedder

    if not (out / TRIPLETS).exists():
        mine(out, cfg)
    triplets = [TripletExample(r["anchor"], r["positive"], r["negative"], tuple(r["pool"]))
                for r in read_jsonl(out / TRIPLETS)]
    if not triplets:
        raise UsageError("no triplets to train on")
    conf = TripletTrainConfig(**{"seed": cfg.seed, **_pick(TripletTrainConfig, cfg.embedder)})
    params = train_embedder(triplets, conf)
    params.save(out / EMBEDDER)
    return {"epochs": conf.epochs, "first_loss": params.history[:1], "last_loss": params.history[-1:]}


def _provider(cfg: RunConfig, token_dim: int):
    from .crossenc import HashTokenEncoder, RemoteTokenEncoder

    enc = dict(cfg.encoder)
    kind = enc.pop("kind", "hash")
    if kind == "hash":
        return HashTokenEncoder(dim=token_dim, seed=cfg.seed)
    if kind == "remote":
        return RemoteTokenEncoder(enc["url"], enc.get("model", "default"), dim=token_dim,
                                  timeout=enc.get("timeout", 30.0), retries=enc.get("retries", 3))
    raise UsageError(f"unknown encoder kind {kind!r}")


def train_crossenc_cmd(out: Path, cfg: RunConfig) -> dict:
    from .crossenc import CrossEncoderConfig, CrossTrainConfig, LabeledExample, train_cross_encoder

    catalogs, instances, _ = _load_run(out)
    examples = [LabeledExample(i, catalogs[i.db_id], i.gold_schema) for i in _usable(instances)]
    if not examples:
        raise UsageError("no labeled instances to train on")
    model = CrossEncoderConfig(**_pick(CrossEncoderConfig, cfg.crossenc))
    train = CrossTrainConfig(**{"seed": cfg.seed, **_pick(CrossTrainConfig, cfg.crossenc)})
    params = train_cross_encoder(examples, _provider(cfg, model.token_dim), train, model=model)
    params.save(out / CROSSENC)
    return {"epochs": train.epochs, "first_loss": params.history[:1], "last_loss": params.history[-1:]}


# ----------------------------------------------------------------------------
# linking / generation

def _llm_client(cfg: RunConfig, mock: str | None):
    from .llmlink import HttpLlmClient, LlmClientConfig, MockLlmClient

    if mock:
        return MockLlmClient.from_file(mock)
    if not cfg.llm.get("url"):
        raise UsageError("no LLM endpoint configured: set llm.url in --config or pass --mock-llm")
    return HttpLlmClient(LlmClientConfig(**_pick(LlmClientConfig, cfg.llm)))


def _cycle_config(cfg: RunConfig):
    from .pipeline import CycleConfig

    if cfg.scorers:
        return CycleConfig.uniform(cfg.cycles, cfg.scorers)
    return CycleConfig(num_cycles=cfg.cycles)


def _build_scorers(out: Path, cfg: RunConfig, needed: set[str], mock: str | None) -> dict:
    from .pipeline import ColumnScorer, DatabaseScorer, TableScorer

    scorers = {}
    if "column" in needed:
        remote = cfg.embedder.get("remote")
        if remote:
            from .embedder import RemoteEmbedder

            emb = RemoteEmbedder(remote["url"], remote.get("model", "default"))
        else:
            from .embedder import EmbedderParams

            if not (out / EMBEDDER).exists():
                raise UsageError(f"column scorer needs {EMBEDDER}; run `train-embedder` first")
            emb = EmbedderParams.load(out / EMBEDDER)
        scorers["column"] = ColumnScorer(emb, cfg.column_threshold)
    if "table" in needed:
        from .crossenc import CrossEncoderParams, SelectionRule

        if not (out / CROSSENC).exists():
            raise UsageError(f"table scorer needs {CROSSENC}; run `train-crossenc` first")
        params = CrossEncoderParams.load(out / CROSSENC)
        scorers["table"] = TableScorer(params, _provider(cfg, params.config.token_dim),
                                       SelectionRule(**_pick(SelectionRule, cfg.rule)))
    if "database" in needed:
        scorers["database"] = DatabaseScorer(_llm_client(cfg, mock), cfg.link_retries)
    return scorers


def link(out: Path, cfg: RunConfig, mock: str | None) -> dict:
    from .pipeline import CycleError, run_chain

    catalogs, instances, _ = _load_run(out)
    plan = _cycle_config(cfg)
    needed = {s for k in range(1, plan.num_cycles + 1) for s in plan.scorers_for(k)}
    scorers = _build_scorers(out, cfg, needed, mock)

    def one(inst: Instance):
        try:
            final, trace = run_chain(inst, catalogs[inst.db_id], scorers, plan)
            return final, trace
        except CycleError as exc:
            return None, exc.trace

    with ThreadPoolExecutor(max_workers=max(cfg.jobs, 1)) as pool:
        results = list(pool.map(one, instances))

    preds, traces, timing, failed = [], [], {}, 0
    for inst, (final, trace) in zip(instances, results):
        failed += final is None
        preds.append({"id": inst.id, "schema": None if final is None else final.to_strings(), "trace": inst.id})
        traces.append(trace.to_record(include_timing=False))
        timing[inst.id] = [c.timings for c in trace.cycles]
    write_jsonl(out / PREDICTIONS, preds)
    write_jsonl(out / TRACES, traces)
    _write_json(out / "link_timing.json", timing)
    return {"linked": len(instances) - failed, "failed": failed}


def generate(out: Path, cfg: RunConfig, mock: str | None) -> dict:
    from .llmlink import LlmClientError, generate_sql

    catalogs, instances, _ = _load_run(out)
    if not (out / PREDICTIONS).exists():
        raise UsageError(f"{out} has no {PREDICTIONS}; run `link` first")
    linked = {r["id"]: r for r in read_jsonl(out / PREDICTIONS)}
    client = _llm_client(cfg, mock)

    def one(inst: Instance):
        rec = linked.get(inst.id)
        if rec is None or rec["schema"] is None:
            return {"id": inst.id, "sql": None, "unparseable": True, "error": "no linked schema"}
        try:
            res = generate_sql(client, inst, SchemaSet.from_strings(rec["schema"]), catalogs[inst.db_id])
        except LlmClientError as exc:
            return {"id": inst.id, "sql": None, "unparseable": True, "error": str(exc)}
        return {"id": inst.id, "sql": res.sql_text, "unparseable": res.unparseable, "raw": res.raw_response}

    with ThreadPoolExecutor(max_workers=max(cfg.jobs, 1)) as pool:
        rows = list(pool.map(one, instances))
    for r in rows:
        r["schema"] = linked.get(r["id"], {}).get("schema")
    write_jsonl(out / GENERATIONS, rows)
    return {"generated": sum(1 for r in rows if r["sql"]), "failed": sum(1 for r in rows if not r["sql"])}


# ----------------------------------------------------------------------------
# evaluation

def _plan_name(cfg: RunConfig) -> str:
    plan = _cycle_config(cfg)
    return "/".join("+".join(plan.scorers_for(k)) for k in range(1, plan.num_cycles + 1))


def evaluate(out: Path, cfg: RunConfig) -> dict:
    from .metrics import (
        VES_NOTE,
        DatasetError,
        aggregate_em,
        execution_accuracy,
        linking_row,
        render_markdown,
        valid_efficiency_score,
    )

    _, instances, manifest = _load_run(out)
    gold = {i.id: i for i in _usable(instances) if i.gold_sql}
    traces = {r["id"]: r for r in read_jsonl(out / TRACES)} if (out / TRACES).exists() else {}
    gens = {r["id"]: r for r in read_jsonl(out / GENERATIONS)} if (out / GENERATIONS).exists() else {}
    if not traces and not gens:
        raise UsageError("nothing to evaluate: run `link` and/or `generate` first")
    for ids in (traces, gens):
        stray = sorted(set(ids) - {i.id for i in instances})
        if stray:
            raise UsageError(f"prediction ids not in the instance file: {stray[:5]}")

    ids = [i for i in gold if i in traces] if traces else [i for i in gold if i in gens]
    rows, timing, excluded = [], {}, []
    method = _plan_name(cfg)
    if traces:
        n_cycles = max(len(traces[i]["cycles"]) for i in ids)
        for k in range(n_cycles):
            preds, golds = [], []
            for i in ids:
                cyc = traces[i]["cycles"]
                preds.append(SchemaSet.from_strings(cyc[min(k, len(cyc) - 1)]["union"]) if cyc else SchemaSet())
                golds.append(gold[i].gold_schema)
            rows.append(linking_row(method, k + 1, preds, golds))
    if gens:
        gen_ids = [i for i in ids if i in gens]
        outcomes, kept = [], []
        for i in gen_ids:
            db_file = manifest["db_files"].get(gold[i].db_id)
            if db_file is None:
                raise UsageError(f"no database file for {gold[i].db_id}")
            try:
                outcomes.append(execution_accuracy(db_file, gens[i]["sql"], gold[i].gold_sql,
                                                   timeout=cfg.exec_timeout, runs=cfg.ves_runs))
                kept.append(i)
            except DatasetError as exc:
                excluded.append(i)
                log.warning("instance %s excluded: %s", i, exc)
        em = aggregate_em([gens[i]["sql"] for i in kept], [gold[i].gold_sql for i in kept])
        flags = [o.flag for o in outcomes]
        ex = sum(flags) / len(flags) if flags else 0.0
        gen_row = {"EX": round(100 * ex, 2), "EM": round(100 * em.em, 2), "n_exec": len(kept),
                   "unparseable": em.unparseable}
        if rows:
            rows[-1].update(gen_row)
        else:
            rows.append({"method": method, "cycle": None, "n": len(kept),
                         "table": {"MA": None, "IA": None, "RE": None},
                         "column": {"MA": None, "IA": None, "RE": None}, **gen_row})
        if flags:
            ves = valid_efficiency_score(flags, [o.gold_time for o in outcomes], [o.pred_time for o in outcomes])
            timing = {"VES": round(100 * ves, 2), "note": VES_NOTE,
                      "per_instance": {i: {"flag": o.flag, "gold_s": o.gold_time, "pred_s": o.pred_time}
                                       for i, o in zip(kept, outcomes)}}
    report = {"method": method, "rows": rows, "excluded": excluded,
              "note": "values x100, rounded to 2 decimals; VES and timings are in timing.json"}
    _write_json(out / "report.json", report)
    (out / "report.md").write_text(render_markdown(report), encoding="utf-8")
    if timing:
        _write_json(out / "timing.json", timing)
    return {"rows": len(rows), "excluded": len(excluded)}


# ----------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--jobs", type=int, help="instance-level parallelism")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="schemalink", description="Progressive schema linking for Text-to-SQL")
    sub = p.add_subparsers(dest="command", required=True)
    ing = sub.add_parser("ingest", parents=[common], help="normalize a Spider/Bird-layout dataset")
    ing.add_argument("dataset_dir")
    ing.add_argument("--split", default="dev")
    sub.add_parser("mine-triplets", parents=[common], help="mine column-level training triplets")
    sub.add_parser("train-embedder", parents=[common], help="train the column-level embedder")
    sub.add_parser("train-crossenc", parents=[common], help="train the table-level cross encoder")
    for name, helptext in (("link", "run the chain loop"), ("generate", "generate SQL from linked schemas")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--mock-llm", help="scripted LLM responses (JSON) instead of the endpoint")
        if name == "link":
            sp.add_argument("--cycles", type=int)
            sp.add_argument("--scorers", help="comma list from column,table,database (all cycles)")
    ev = sub.add_parser("evaluate", parents=[common], help="compute metrics and write the report")
    ev.add_argument("--cycles", type=int, help="cycle count the run used (for the report label)")
    ev.add_argument("--scorers", help="scorers the run used (for the report label)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "cycles", None) is not None:
            cfg.cycles = args.cycles
        if getattr(args, "scorers", None):
            cfg.scorers = [s.strip() for s in args.scorers.split(",") if s.strip()]
        out = Path(args.out)
        mock = getattr(args, "mock_llm", None)
        if mock and not Path(mock).exists():
            raise UsageError(f"mock script {mock} does not exist")
        cmd = args.command
        if cmd == "ingest":
            summary = ingest(args.dataset_dir, out, args.split)
        elif cmd == "mine-triplets":
            summary = mine(out, cfg)
        elif cmd == "train-embedder":
            summary = train_embedder_cmd(out, cfg)
        elif cmd == "train-crossenc":
            summary = train_crossenc_cmd(out, cfg)
        elif cmd == "link":
            summary = link(out, cfg, mock)
        elif cmd == "generate":
            summary = generate(out, cfg, mock)
        else:
            summary = evaluate(out, cfg)
    except (UsageError, CatalogError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
