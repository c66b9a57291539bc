"""Train both scorers on the synthetic corpus and run the chain loop.

    python demos/walkthrough.py [workdir]

Prints per-cycle linking metrics for the default plan and one traced
instance.  Runs offline in well under a minute.
"""

import sys
import tempfile
from pathlib import Path

from schemalink.crossenc import CrossEncoderConfig, CrossTrainConfig, HashTokenEncoder, LabeledExample, train_cross_encoder
from schemalink.embedder import TripletTrainConfig, mine_triplets, train_embedder
from schemalink.llmlink import MockLlmClient
from schemalink.metrics import linking_row, render_markdown
from schemalink.pipeline import ColumnScorer, CycleConfig, DatabaseScorer, TableScorer, run_chain
from schemalink.synthetic import mock_llm_script, write_dataset


def main(workdir: Path) -> None:
    corpus = write_dataset(workdir)
    insts = corpus.instances
    print(f"{len(insts)} questions over {len(corpus.catalogs)} databases in {workdir}")

    triplets = [t for i in insts for t in mine_triplets(i, i.gold_schema, corpus.catalogs[i.db_id])]
    embedder = train_embedder(triplets, TripletTrainConfig(margin=1.0, epochs=200))
    print(f"embedder: {len(triplets)} triplets, loss {embedder.history[0]:.3f} -> {embedder.history[-1]:.3f}")

    provider = HashTokenEncoder(dim=64)
    examples = [LabeledExample(i, corpus.catalogs[i.db_id], i.gold_schema) for i in insts]
    cross = train_cross_encoder(examples, provider, CrossTrainConfig(epochs=40), model=CrossEncoderConfig())
    print(f"cross encoder: L_t {cross.history[0]:.3f} -> {cross.history[-1]:.3f}")

    scorers = {
        "column": ColumnScorer(embedder, 0.5),
        "table": TableScorer(cross, provider),
        "database": DatabaseScorer(MockLlmClient(mock_llm_script(corpus))),
    }
    traces = [run_chain(i, corpus.catalogs[i.db_id], scorers, CycleConfig())[1] for i in insts]
    golds = [i.gold_schema for i in insts]
    rows = [linking_row("default plan", k + 1, [t.cycles[k].union for t in traces], golds) for k in range(2)]
    print()
    print(render_markdown({"rows": rows}))

    t = traces[0]
    print(f"instance {t.instance_id}: {insts[0].question!r}")
    for c in t.cycles:
        outs = ", ".join(f"{k}={len(v)}" for k, v in c.outputs.items())
        print(f"  cycle {c.cycle}: {len(c.input)} in, {outs}, union {sorted(c.union.to_strings())}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="schemalink-")))
