"""mm-forge command line: run/resume the pipeline and drive single stages.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import dedup as dedup_mod
from . import mapping as mapping_mod
from . import pipeline as pipe
from .corpus import ImageRef, ImageResolver, read_records_jsonl, write_records_jsonl
from .fixture_corpus import build_fixture_corpus
from .fixture_server import FixtureServer
from .images import grayscale_pixels
from .taxonomy import TaxonomyError, load_taxonomy

EXIT_CONFIG = 2
EXIT_STAGE = 3

_SUBSTAGE_TO_STAGE = {
    "questions": "synth_questions",
    "judge": "synth_judge",
    "answers": "synth_answers",
    "score": "synth_score",
    "assemble": "assemble",
}


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _print_summary(summary: pipe.RunSummary) -> None:
    click.echo(f"run {summary.run_id} complete in {summary.run_dir}")
    click.echo(f"  executed: {', '.join(summary.executed) or '(none)'}")
    click.echo(f"  skipped:  {', '.join(summary.skipped) or '(none)'}")


@click.group()
def main() -> None:
    """Tag-guided multimodal instruction data synthesis and curation."""


@main.command(name="run")
@click.option("-c", "--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def run_cmd(config_path: str) -> None:
    """Execute the full pipeline from a declarative config."""
    try:
        config = pipe.load_config(config_path)
        summary = pipe.run(config)
    except pipe.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except pipe.StageFailure as exc:
        _fail(EXIT_STAGE, str(exc))
    _print_summary(summary)


@main.command(name="resume")
@click.argument("run_id")
@click.option("--root", default="runs", show_default=True,
              type=click.Path(file_okay=False))
def resume_cmd(run_id: str, root: str) -> None:
    """Resume a checkpointed run, skipping unchanged completed stages."""
    run_dir = Path(root) / run_id
    try:
        summary = pipe.resume(run_dir)
    except pipe.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except pipe.StageFailure as exc:
        _fail(EXIT_STAGE, str(exc))
    _print_summary(summary)


@main.group()
def taxonomy() -> None:
    """Taxonomy asset utilities."""


@taxonomy.command(name="validate")
@click.argument("asset", required=False,
                type=click.Path(exists=True, dir_okay=False))
def taxonomy_validate(asset: str | None) -> None:
    """Validate a taxonomy asset (default: the bundled one)."""
    try:
        tax = load_taxonomy(asset)
    except TaxonomyError as exc:
        _fail(EXIT_CONFIG, f"invalid taxonomy: {exc}")
    click.echo(f"taxonomy ok: {len(tax.roots)} categories, "
               f"{tax.leaf_count} sub-tasks")


@main.group(name="map")
def map_group() -> None:
    """Build and query the image-tag / instruction-tag mapping."""


@map_group.command(name="build")
@click.option("--seeds", "seeds_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSONL of seed examples")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--taxonomy", "taxonomy_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
def map_build(seeds_path: str, out_path: str, taxonomy_path: str | None) -> None:
    """Count co-occurrences over seed examples and write TF-IDF weights."""
    tax = load_taxonomy(taxonomy_path)
    seeds = []
    with open(seeds_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            image = row["image"]
            seeds.append(mapping_mod.SeedExample(
                image=ImageRef(
                    image_id=image["image_id"], uri=image["uri"],
                    width=image["width"], height=image["height"],
                    format=image["format"]),
                image_tags=frozenset(row["image_tags"]),
                question=row["question"],
                answer=row["answer"],
                instruction_tag=tax.resolve(row["instruction_tag"]),
            ))
    if not seeds:
        _fail(EXIT_CONFIG, "seed file is empty")
    table = mapping_mod.compute_tfidf(mapping_mod.count_cooccurrence(seeds))
    mapping_mod.save_mapping(table, out_path)
    click.echo(f"mapping written: {table.units} units -> {out_path}")


@map_group.command(name="select")
@click.option("--mapping", "mapping_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--tags", required=True, help="comma-separated image tags")
@click.option("-k", "top_k", default=mapping_mod.DEFAULT_TOP_K, show_default=True)
@click.option("--taxonomy", "taxonomy_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
def map_select(mapping_path: str, tags: str, top_k: int,
               taxonomy_path: str | None) -> None:
    """Rank instruction types for an image's tag set."""
    tax = load_taxonomy(taxonomy_path)
    table = mapping_mod.load_mapping(mapping_path, tax)
    tag_set = {t.strip().lower() for t in tags.split(",") if t.strip()}
    ranked = mapping_mod.select_instruction_types(tag_set, table, k=top_k)
    if not ranked:
        click.echo("(no instruction type matches these tags)")
    for tag, score in ranked:
        click.echo(f"{score:.6f}  {tag.path}")


@main.command(name="synth")
@click.argument("substage", type=click.Choice(sorted(_SUBSTAGE_TO_STAGE)))
@click.option("--run-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--force", is_flag=True, help="re-run even if checkpointed done")
def synth_cmd(substage: str, run_dir: str, force: bool) -> None:
    """Execute one resumable synthesis substage inside an existing run."""
    stage = _SUBSTAGE_TO_STAGE[substage]
    try:
        checkpoint = pipe.Checkpoint.load(Path(run_dir))
        config = pipe.PipelineConfig.from_snapshot(checkpoint.config_snapshot)
        summary = pipe.run(config, stages=[stage], force=force)
    except pipe.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except pipe.StageFailure as exc:
        _fail(EXIT_STAGE, str(exc))
    _print_summary(summary)


@main.command(name="dedup")
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--image-root", "image_root", default=".", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--near-dup-threshold", default=dedup_mod.DEFAULT_NEAR_DUP_THRESHOLD,
              show_default=True, type=click.IntRange(0, 64))
@click.option("--loss-table", "loss_table", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="optional JSONL of {record_id, loss} to apply loss filtering")
@click.option("--loss-drop-fraction", default=dedup_mod.DEFAULT_LOSS_DROP_FRACTION,
              show_default=True, type=click.FloatRange(0, 1, max_open=True))
def dedup_cmd(input_path: str, output_path: str, image_root: str,
              near_dup_threshold: int, loss_table: str | None,
              loss_drop_fraction: float) -> None:
    """Exact + perceptual dedup of a records file, optional loss filter."""
    records = read_records_jsonl(input_path)
    resolver = ImageResolver(image_root)
    hashes: dict[str, dedup_mod.PHash] = {}
    for rec in records:
        if rec.image is not None and rec.image.image_id not in hashes:
            gray = grayscale_pixels(resolver.bytes_for(rec.image.uri))
            hashes[rec.image.image_id] = dedup_mod.phash64(gray)
    kept, exact_stats = dedup_mod.dedup_exact(records)
    kept, near_stats = dedup_mod.near_dup_filter(kept, hashes, near_dup_threshold)
    loss_stats = None
    if loss_table:
        losses = dedup_mod.load_loss_table(loss_table)
        kept, loss_stats = dedup_mod.loss_percentile_filter(
            kept, losses, loss_drop_fraction)
    write_records_jsonl(output_path, kept)
    click.echo(f"exact: dropped {exact_stats.dropped}/{exact_stats.seen}; "
               f"near-dup: dropped {near_stats.dropped}/{near_stats.seen}"
               + (f"; loss: dropped {loss_stats.dropped}/{loss_stats.seen}"
                  if loss_stats else ""))


@main.command(name="manifest")
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--budget", "budgets", multiple=True,
              help="per-stage cap, e.g. --budget Stage1=100")
def manifest_cmd(input_path: str, out_dir: str, budgets: tuple[str, ...]) -> None:
    """Partition a corpus file into the six stage manifests."""
    budget_map: dict[str, int] = {}
    for item in budgets:
        stage, _, value = item.partition("=")
        if stage not in pipe.STAGE_IDS or not value.isdigit():
            _fail(EXIT_CONFIG, f"bad --budget {item!r}; expected StageN=<count>")
        budget_map[stage] = int(value)
    records = read_records_jsonl(input_path)
    manifests = pipe.emit_manifests(records, budget_map, out_dir)
    for manifest in manifests:
        click.echo(f"{manifest.stage}: {manifest.record_count} records")


@main.command(name="report")
@click.option("--run-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
def report_cmd(run_dir: str) -> None:
    """Regenerate the report for a completed run and print the text table."""
    try:
        checkpoint = pipe.Checkpoint.load(Path(run_dir))
        config = pipe.PipelineConfig.from_snapshot(checkpoint.config_snapshot)
        pipe.run(config, stages=["report"], force=True)
    except pipe.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except pipe.StageFailure as exc:
        _fail(EXIT_STAGE, str(exc))
    click.echo((Path(run_dir) / pipe.A_REPORT_TXT).read_text(encoding="utf-8"))


@main.group()
def fixtures() -> None:
    """Deterministic fixtures for offline runs and demos."""


@fixtures.command(name="corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
def fixtures_corpus(out_dir: str, seed: int) -> None:
    """Generate the 200-row fixture corpus plus a ready-to-run config."""
    summary = build_fixture_corpus(out_dir, seed=seed)
    click.echo(f"fixture corpus: {summary['rows']} rows, "
               f"{summary['images']} images, config at {summary['config']}")


@fixtures.command(name="serve")
@click.option("--seed", default=0, show_default=True, type=int)
def fixtures_serve(seed: int) -> None:
    """Run the deterministic mock model server until interrupted."""
    server = FixtureServer(seed=seed).start()
    click.echo(f"fixture server listening on {server.url} (Ctrl-C to stop)")
    try:
        import time

        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()


if __name__ == "__main__":
    main()
