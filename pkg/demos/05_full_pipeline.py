"""The whole pipeline, offline, in one sitting.

Builds the 200-row fixture corpus in a temp directory, runs every stage
against the built-in mock endpoints, then walks through the artifacts a
run leaves behind: deduped records, the learned mapping, synthesized QA,
stage manifests, and the report.
"""

import json
import tempfile
from pathlib import Path

from mmforge import pipeline as pipe
from mmforge.fixture_corpus import build_fixture_corpus

workdir = Path(tempfile.mkdtemp(prefix="mmforge-demo-"))
print(f"working in {workdir}")

summary_info = build_fixture_corpus(workdir, seed=0, run_id="demo")
print(f"fixture corpus: {summary_info['rows']} rows, "
      f"{summary_info['images']} images")

config = pipe.load_config(workdir / "config.yaml")
summary = pipe.run(config)
run_dir = summary.run_dir
print(f"stages executed: {', '.join(summary.executed)}")
print()

ingest = json.loads((run_dir / pipe.A_INGEST_STATS).read_text())
print(f"ingested: {ingest['total']['emitted']} records "
      f"({ingest['total']['rejected']} rejected)")

dedup = json.loads((run_dir / pipe.A_DEDUP_STATS).read_text())
print(f"dedup: {dedup['exact']['dropped']} exact, "
      f"{dedup['near_dup']['dropped']} near duplicates dropped")

tagmap = json.loads((run_dir / pipe.A_TAGMAP_STATS).read_text())
print(f"mapping: {tagmap['seed_examples']} seed examples over "
      f"{tagmap['units']} instruction types")

judged = json.loads((run_dir / pipe.A_CANDIDATES_STATS).read_text())
scored = json.loads((run_dir / pipe.A_QA_SCORED_STATS).read_text())
print(f"synthesis: {judged['judged']} questions judged, "
      f"{judged['relevant']} relevant, {scored['retained']} passed the "
      f"quality gate (threshold {scored['quality_threshold']})")

assembled = json.loads((run_dir / pipe.A_RECORDS_SYNTH_STATS).read_text())
print(f"assembly: {assembled['input_qas']} QAs -> {assembled['records']} "
      f"multi-turn records (avg {assembled['avg_turns_per_record']:.2f} "
      f"turns/record)")
print()

manifests = json.loads((run_dir / pipe.A_MANIFEST_INDEX).read_text())
print("stage manifests:")
for stage in manifests["stages"]:
    print(f"  {stage['stage']:8s} {stage['record_count']:4d} records "
          f"({', '.join(stage['categories'])})")
print()

# a second run with the same seed is a no-op: everything checkpointed
again = pipe.run(config)
print(f"re-run: executed={again.executed or 'nothing'} "
      f"(all {len(again.skipped)} stages unchanged)")
print()
print(f"full report at {run_dir / pipe.A_REPORT_TXT}:")
print((run_dir / pipe.A_REPORT_TXT).read_text())
