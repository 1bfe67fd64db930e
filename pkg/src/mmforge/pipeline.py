"""End-to-end orchestration: config, checkpointed stages, manifests, report.

A run executes a fixed acyclic stage sequence (ingest, dedup, tag/map,
the four synthesis substages, filter, assemble, manifests, report) inside
``<out_root>/<run_id>/``. After every stage the checkpoint records input
and output digests; resuming skips any completed stage whose inputs are
unchanged. All artifacts are free of timestamps and absolute paths, so a
repeated run with the same config and seed is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests
import yaml

from . import corpus as corpus_mod
from . import dedup as dedup_mod
from . import mapping as mapping_mod
from . import synthesis as synth_mod
from .corpus import (DataCategory, ImageResolver, InstructionRecord, Provenance,
                     SourceSpec, SubType, corpus_stats, read_records_jsonl,
                     write_records_jsonl)
from .fixture_server import FixtureServer
from .gateway import EndpointConfig, Gateway, RetryPolicy
from .images import grayscale_pixels
from .taxonomy import LEVEL1_CATEGORIES, Taxonomy, load_taxonomy

logger = logging.getLogger(__name__)

ENV_VLM_URL = "MMFORGE_VLM_URL"
ENV_VLM_KEY = "MMFORGE_VLM_KEY"
ENV_TAGGER_URL = "MMFORGE_TAGGER_URL"
ENV_SCORER_URL = "MMFORGE_SCORER_URL"

STAGE_IDS = ("Stage1", "Stage2a", "Stage2b", "Stage2c", "Stage3", "Stage4")

_STAGE_CATEGORY = {
    "Stage1": DataCategory.IMAGE_CAPTION,
    "Stage2a": DataCategory.COMPREHENSIVE,
    "Stage2b": DataCategory.COMPREHENSIVE,
    "Stage2c": DataCategory.COMPREHENSIVE,
    "Stage3": DataCategory.SELECTIVE,
    "Stage4": DataCategory.GPT4_AND_SYNTHETIC,
}

# run-dir artifact names
A_RECORDS_RAW = "records_raw.jsonl"
A_INGEST_STATS = "records_raw.stats.json"
A_HASH_CACHE = "hash_cache.jsonl"
A_RECORDS_DEDUP = "records_dedup.jsonl"
A_DEDUP_STATS = "records_dedup.stats.json"
A_IMAGE_TAGS = "image_tags.jsonl"
A_MAPPING = "mapping.jsonl"
A_TAGMAP_STATS = "mapping.stats.json"
A_CANDIDATES_RAW = "candidates_raw.jsonl"
A_CANDIDATES_RAW_STATS = "candidates_raw.stats.json"
A_CANDIDATES = "candidates.jsonl"
A_CANDIDATES_STATS = "candidates.stats.json"
A_QA_UNSCORED = "qa_unscored.jsonl"
A_QA_UNSCORED_STATS = "qa_unscored.stats.json"
A_QA_SCORED = "qa_scored.jsonl"
A_QA_SCORED_STATS = "qa_scored.stats.json"
A_QA_LOSSES = "qa_losses.jsonl"
A_QA_RETAINED = "qa_retained.jsonl"
A_CORPUS_LOSSES = "corpus_losses.jsonl"
A_RECORDS_KEPT = "records_kept.jsonl"
A_FILTER_STATS = "filter.stats.json"
A_RECORDS_SYNTH = "records_synth.jsonl"
A_RECORDS_SYNTH_STATS = "records_synth.stats.json"
A_CORPUS_FINAL = "corpus_final.jsonl"
MANIFEST_DIR = "manifests"
A_MANIFEST_INDEX = "manifests/manifests.json"
A_REPORT_JSON = "report.json"
A_REPORT_TXT = "report.txt"
CHECKPOINT_FILE = "checkpoint.json"


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (exit code 2)."""


class StageFailure(RuntimeError):
    """A stage raised; the run halted with a resumable checkpoint (exit 3)."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True,
                               ensure_ascii=False) + "\n", encoding="utf-8")


def _atomic_write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True,
                              ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class SourceEntry:
    name: str
    adapter: str
    path: Path
    category: DataCategory
    subtype: SubType
    provenance: Provenance = Provenance.COLLECTED

    def spec(self) -> SourceSpec:
        return SourceSpec(name=self.name, adapter=self.adapter,
                          default_category=self.category,
                          default_subtype=self.subtype,
                          provenance=self.provenance)


@dataclass
class PipelineConfig:
    run_id: str
    out_root: Path
    seed: int
    offline: bool
    image_root: Path
    sources: list[SourceEntry]
    endpoints: dict[str, dict]
    taxonomy_path: Path | None = None
    synth_top_k: int = 3
    synth_max_turns: int = synth_mod.DEFAULT_MAX_TURNS
    synth_workers: int = 4
    synth_style_weights: dict[str, float] = field(
        default_factory=lambda: {s.value: 1.0 for s in synth_mod.Style})
    synth_budget: int | None = None
    synth_priority: tuple[str, ...] = synth_mod.DEFAULT_PRIORITY_CATEGORIES
    qa_loss_drop_fraction: float = dedup_mod.DEFAULT_LOSS_DROP_FRACTION
    near_dup_threshold: int = dedup_mod.DEFAULT_NEAR_DUP_THRESHOLD
    corpus_loss_drop_fraction: float = dedup_mod.DEFAULT_LOSS_DROP_FRACTION
    manifest_budgets: dict[str, int] = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return self.out_root / self.run_id

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_snapshot(), sort_keys=True)
                              .encode("utf-8")).hexdigest()

    def to_snapshot(self) -> dict:
        return {
            "run_id": self.run_id,
            "out_root": str(self.out_root),
            "seed": self.seed,
            "offline": self.offline,
            "image_root": str(self.image_root),
            "taxonomy": str(self.taxonomy_path) if self.taxonomy_path else None,
            "sources": [{
                "name": s.name, "adapter": s.adapter, "path": str(s.path),
                "category": s.category.value, "subtype": s.subtype.value,
                "provenance": s.provenance.value,
            } for s in self.sources],
            "endpoints": self.endpoints,
            "synthesis": {
                "top_k": self.synth_top_k,
                "max_turns": self.synth_max_turns,
                "workers": self.synth_workers,
                "style_weights": self.synth_style_weights,
                "budget": self.synth_budget,
                "priority_categories": list(self.synth_priority),
                "qa_loss_drop_fraction": self.qa_loss_drop_fraction,
            },
            "dedup": {
                "near_dup_threshold": self.near_dup_threshold,
                "loss_drop_fraction": self.corpus_loss_drop_fraction,
            },
            "manifests": {"budgets": self.manifest_budgets},
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "PipelineConfig":
        return _config_from_dict(snap, base=Path("."), resolved=True)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _config_from_dict(raw: dict, base: Path, resolved: bool = False) -> PipelineConfig:
    def respath(value: str) -> Path:
        p = Path(value)
        if resolved or p.is_absolute():
            return p
        return (base / p).resolve()

    try:
        sources = []
        for entry in raw.get("sources", []):
            sources.append(SourceEntry(
                name=entry["name"],
                adapter=entry["adapter"],
                path=respath(entry["path"]),
                category=DataCategory(entry["category"]),
                subtype=SubType(entry["subtype"]),
                provenance=Provenance(entry.get("provenance", "collected")),
            ))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad source entry: {exc}") from exc
    _require(bool(sources), "config needs at least one source")
    for entry in sources:
        entry.spec()  # validates adapter + category pairing

    synthesis = raw.get("synthesis", {}) or {}
    dedup = raw.get("dedup", {}) or {}
    manifests = raw.get("manifests", {}) or {}
    budgets = dict(manifests.get("budgets") or {})
    for stage in budgets:
        _require(stage in STAGE_IDS,
                 f"unknown stage {stage!r} in manifest budgets; "
                 f"valid: {list(STAGE_IDS)}")
        _require(int(budgets[stage]) >= 0, f"budget for {stage} must be >= 0")
    priority = tuple(synthesis.get("priority_categories",
                                   synth_mod.DEFAULT_PRIORITY_CATEGORIES))
    for category in priority:
        _require(category in LEVEL1_CATEGORIES,
                 f"unknown priority category {category!r}")
    style_weights = dict(synthesis.get("style_weights") or
                         {s.value: 1.0 for s in synth_mod.Style})
    for name in style_weights:
        _require(name in {s.value for s in synth_mod.Style},
                 f"unknown answer style {name!r}")

    endpoints = {name: dict(cfg or {}) for name, cfg in
                 (raw.get("endpoints") or {}).items()}
    for name in endpoints:
        _require(name in ("vlm", "tagger", "scorer"),
                 f"unknown endpoint {name!r}; expected vlm/tagger/scorer")

    offline = bool(raw.get("offline", False))
    out_root = respath(str(raw.get("out_root", "runs")))
    config = PipelineConfig(
        run_id=str(raw["run_id"]) if raw.get("run_id") else "",
        out_root=out_root,
        seed=int(raw.get("seed", 0)),
        offline=offline,
        image_root=respath(str(raw.get("image_root", "."))),
        sources=sources,
        endpoints=endpoints,
        taxonomy_path=respath(raw["taxonomy"]) if raw.get("taxonomy") else None,
        synth_top_k=int(synthesis.get("top_k", 3)),
        synth_max_turns=int(synthesis.get("max_turns", synth_mod.DEFAULT_MAX_TURNS)),
        synth_workers=int(synthesis.get("workers", 4)),
        synth_style_weights=style_weights,
        synth_budget=(int(synthesis["budget"])
                      if synthesis.get("budget") is not None else None),
        synth_priority=priority,
        qa_loss_drop_fraction=float(synthesis.get(
            "qa_loss_drop_fraction", dedup_mod.DEFAULT_LOSS_DROP_FRACTION)),
        near_dup_threshold=int(dedup.get(
            "near_dup_threshold", dedup_mod.DEFAULT_NEAR_DUP_THRESHOLD)),
        corpus_loss_drop_fraction=float(dedup.get(
            "loss_drop_fraction", dedup_mod.DEFAULT_LOSS_DROP_FRACTION)),
        manifest_budgets={k: int(v) for k, v in budgets.items()},
    )
    _require(0 <= config.near_dup_threshold <= 64,
             "near_dup_threshold must be in [0, 64]")
    _require(0 <= config.qa_loss_drop_fraction < 1,
             "qa_loss_drop_fraction must be in [0, 1)")
    _require(0 <= config.corpus_loss_drop_fraction < 1,
             "dedup.loss_drop_fraction must be in [0, 1)")
    _require(config.synth_top_k >= 0, "synthesis.top_k must be >= 0")
    _require(config.synth_max_turns >= 1, "synthesis.max_turns must be >= 1")
    if not config.run_id:
        config.run_id = config.fingerprint()[:12]
    return config


def _apply_env_overrides(endpoints: dict[str, dict]) -> None:
    vlm_url = os.environ.get(ENV_VLM_URL)
    vlm_key = os.environ.get(ENV_VLM_KEY)
    tagger_url = os.environ.get(ENV_TAGGER_URL)
    scorer_url = os.environ.get(ENV_SCORER_URL)
    if vlm_url:
        endpoints.setdefault("vlm", {})["base_url"] = vlm_url
    if vlm_key:
        endpoints.setdefault("vlm", {})["api_key"] = vlm_key
    if tagger_url:
        endpoints.setdefault("tagger", {})["base_url"] = tagger_url
    if scorer_url:
        endpoints.setdefault("scorer", {})["base_url"] = scorer_url


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a declarative run config (YAML or JSON).

    Relative paths resolve against the config file's directory; the
    MMFORGE_* environment variables override endpoint URLs and keys.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    config = _config_from_dict(raw, base=path.parent)
    _apply_env_overrides(config.endpoints)
    if not config.offline:
        for name in ("vlm", "tagger", "scorer"):
            _require(bool(config.endpoints.get(name, {}).get("base_url")),
                     f"endpoint {name!r} needs a base_url (or set offline: true)")
    for entry in config.sources:
        _require(entry.path.exists(), f"source file missing: {entry.path}")
    return config


def check_endpoints_reachable(config: PipelineConfig, timeout: float = 3.0) -> None:
    """Fail fast (exit 2) when a configured endpoint does not answer at all."""
    if config.offline:
        return
    for name in ("vlm", "tagger", "scorer"):
        url = config.endpoints[name]["base_url"]
        try:
            requests.get(url, timeout=timeout)
        except requests.RequestException as exc:
            raise ConfigError(f"endpoint {name!r} unreachable at {url}: "
                              f"{exc.__class__.__name__}") from exc


# --- checkpoint ----------------------------------------------------------------

@dataclass
class Checkpoint:
    """Per-stage status and digests; saved atomically after every change."""

    run_id: str
    seed: int
    config_fingerprint: str
    config_snapshot: dict
    stages: dict[str, dict] = field(default_factory=dict)

    def stage(self, name: str) -> dict:
        return self.stages.setdefault(name, {"status": "pending",
                                             "inputs": {}, "outputs": {}})

    def save(self, run_dir: Path) -> None:
        _atomic_write_json(run_dir / CHECKPOINT_FILE, {
            "run_id": self.run_id,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "config_snapshot": self.config_snapshot,
            "stages": self.stages,
        })

    @classmethod
    def load(cls, run_dir: Path) -> "Checkpoint":
        path = run_dir / CHECKPOINT_FILE
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"no checkpoint at {path}: {exc}") from exc
        return cls(run_id=raw["run_id"], seed=raw["seed"],
                   config_fingerprint=raw["config_fingerprint"],
                   config_snapshot=raw["config_snapshot"],
                   stages=raw.get("stages", {}))


# --- run context ----------------------------------------------------------------

class RunContext:
    """Holds everything a stage needs: config, gateways, resolver, paths."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.run_dir = config.run_dir
        self.resolver = ImageResolver(config.image_root)
        self.taxonomy: Taxonomy = load_taxonomy(config.taxonomy_path)
        self.fixture: FixtureServer | None = None
        self._gateways: dict[str, Gateway] = {}
        self.checkpoint: Checkpoint | None = None

    def __enter__(self) -> "RunContext":
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / MANIFEST_DIR).mkdir(exist_ok=True)
        if self.config.offline:
            self.fixture = FixtureServer(seed=self.config.seed).start()
        return self

    def __exit__(self, *exc) -> None:
        if self.fixture is not None:
            self.fixture.stop()
            self.fixture = None

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def _endpoint(self, name: str, temperature: float) -> EndpointConfig:
        if self.config.offline:
            assert self.fixture is not None
            base = {"base_url": self.fixture.url, "model_name": f"fixture-{name}"}
        else:
            base = dict(self.config.endpoints[name])
        retry = base.pop("retry", {})
        return EndpointConfig(
            base_url=base["base_url"],
            model_name=base.get("model_name", name),
            api_key=base.get("api_key", ""),
            max_concurrent=int(base.get("max_concurrent", 8)),
            timeout=float(base.get("timeout", 30.0)),
            retry=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                base_backoff=float(retry.get("base_backoff", 0.5)),
                jitter=float(retry.get("jitter", 0.1)),
            ),
            temperature=float(base.get("temperature", temperature)),
            top_p=float(base.get("top_p", 1.0)),
            max_tokens=int(base.get("max_tokens", 512)),
            seed=self.config.seed,
        )

    def gateway(self, role: str) -> Gateway:
        """Gateways by role: generator, judge, tagger, scorer."""
        if role not in self._gateways:
            endpoint_name = {"generator": "vlm", "judge": "vlm",
                             "tagger": "tagger", "scorer": "scorer"}[role]
            temperature = 0.7 if role == "generator" else 0.0
            self._gateways[role] = Gateway(self._endpoint(endpoint_name,
                                                          temperature))
        return self._gateways[role]

    def synth_config(self) -> synth_mod.SynthesisConfig:
        weights = {synth_mod.Style(name): w
                   for name, w in self.config.synth_style_weights.items()}
        return synth_mod.SynthesisConfig(
            top_k=self.config.synth_top_k,
            rng_seed=self.config.seed,
            style_weights=weights,
            max_turns=self.config.synth_max_turns,
            workers=self.config.synth_workers,
        )


def _parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Map preserving submission order (deterministic result layout)."""
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]


# --- stages ----------------------------------------------------------------------

def stage_ingest(ctx: RunContext) -> None:
    all_records: list[InstructionRecord] = []
    per_source: dict[str, dict] = {}
    total = corpus_mod.IngestStats()
    for entry in ctx.config.sources:
        records, stats = corpus_mod.ingest_file(entry.path, entry.spec(),
                                                ctx.resolver)
        all_records.extend(records)
        per_source[entry.name] = stats.__dict__.copy()
        total = total + stats
    write_records_jsonl(ctx.path(A_RECORDS_RAW), all_records)
    _write_json(ctx.path(A_INGEST_STATS),
                {"per_source": per_source, "total": total.__dict__})


def stage_dedup(ctx: RunContext) -> None:
    records = read_records_jsonl(ctx.path(A_RECORDS_RAW))
    hashes: dict[str, dedup_mod.PHash] = {}
    for rec in records:
        if rec.image is not None and rec.image.image_id not in hashes:
            gray = grayscale_pixels(ctx.resolver.bytes_for(rec.image.uri))
            hashes[rec.image.image_id] = dedup_mod.phash64(gray)
    dedup_mod.save_hash_cache(ctx.path(A_HASH_CACHE), hashes)
    exact, exact_stats = dedup_mod.dedup_exact(records)
    kept, near_stats = dedup_mod.near_dup_filter(
        exact, hashes, ctx.config.near_dup_threshold)
    write_records_jsonl(ctx.path(A_RECORDS_DEDUP), kept)
    _write_json(ctx.path(A_DEDUP_STATS), {
        "exact": exact_stats.__dict__,
        "near_dup": near_stats.__dict__,
        "near_dup_threshold": ctx.config.near_dup_threshold,
    })


def _tag_images(ctx: RunContext, refs: Sequence) -> dict[str, list[str]]:
    """Tag each unique image once via the tagger gateway; sorted tag lists."""
    tagger = ctx.gateway("tagger")

    def tag_one(ref):
        data = ctx.resolver.bytes_for(ref.uri)
        tags = tagger.tag_image(data)
        return ref.image_id, sorted(name for name, _ in tags)

    results = _parallel_map(tag_one, refs, ctx.config.synth_workers)
    return dict(results)


def stage_tagmap(ctx: RunContext) -> None:
    records = read_records_jsonl(ctx.path(A_RECORDS_DEDUP))
    seed_records = [r for r in records
                    if r.image is not None and r.instruction_tags]
    unique_refs: dict[str, object] = {}
    for rec in seed_records:
        unique_refs.setdefault(rec.image.image_id, rec.image)
    image_tags = _tag_images(ctx, list(unique_refs.values()))
    with open(ctx.path(A_IMAGE_TAGS), "w", encoding="utf-8") as fh:
        for image_id in sorted(image_tags):
            fh.write(json.dumps({"image_id": image_id,
                                 "tags": image_tags[image_id]}) + "\n")
    seeds = mapping_mod.seed_examples_from_records(seed_records, image_tags,
                                                   ctx.taxonomy)
    if seeds:
        counts = mapping_mod.count_cooccurrence(seeds)
        table = mapping_mod.compute_tfidf(counts)
    else:
        logger.warning("no seed examples found; writing an empty mapping")
        table = mapping_mod.MappingTable(weights={}, counts={}, units=0)
    mapping_mod.save_mapping(table, ctx.path(A_MAPPING))
    _write_json(ctx.path(A_TAGMAP_STATS), {
        "seed_records": len(seed_records),
        "seed_examples": len(seeds),
        "tagged_images": len(image_tags),
        "units": table.units,
    })


def _load_seed_examples(ctx: RunContext) -> list[mapping_mod.SeedExample]:
    records = read_records_jsonl(ctx.path(A_RECORDS_DEDUP))
    seed_records = [r for r in records
                    if r.image is not None and r.instruction_tags]
    image_tags: dict[str, list[str]] = {}
    with open(ctx.path(A_IMAGE_TAGS), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                image_tags[row["image_id"]] = row["tags"]
    return mapping_mod.seed_examples_from_records(seed_records, image_tags,
                                                  ctx.taxonomy)


def _synthesis_targets(records: Sequence[InstructionRecord]) -> list:
    """Unique images of the GPT-distilled pool, in first-appearance order."""
    seen: dict[str, object] = {}
    for rec in records:
        if (rec.category is DataCategory.GPT4_AND_SYNTHETIC
                and rec.image is not None
                and rec.image.image_id not in seen):
            seen[rec.image.image_id] = rec.image
    return list(seen.values())


def stage_synth_questions(ctx: RunContext) -> None:
    records = read_records_jsonl(ctx.path(A_RECORDS_DEDUP))
    table = mapping_mod.load_mapping(ctx.path(A_MAPPING), ctx.taxonomy)
    seeds = _load_seed_examples(ctx)
    targets = _synthesis_targets(records)
    config = ctx.synth_config()
    tagger = ctx.gateway("tagger")
    generator = ctx.gateway("generator")
    stats = {"images": len(targets), "fallback_tag_images": 0,
             "candidates_generated": 0, "generation_errors": 0}
    seed_bytes_cache: dict[str, bytes] = {}

    def bytes_for_seed(example: mapping_mod.SeedExample) -> bytes:
        uri = example.image.uri
        if uri not in seed_bytes_cache:
            seed_bytes_cache[uri] = ctx.resolver.bytes_for(uri)
        return seed_bytes_cache[uri]

    def process(ref):
        data = ctx.resolver.bytes_for(ref.uri)
        tags = {name for name, _ in tagger.tag_image(data)}
        ranked = mapping_mod.select_instruction_types(tags, table, k=config.top_k)
        fallback = 0
        if ranked:
            chosen = [unit for unit, _ in ranked]
        else:
            fallback = 1
            chosen = [synth_mod.fallback_tag(ctx.taxonomy, config, ref.image_id)]
        out, errors = [], 0
        for tag in chosen:
            exemplars = synth_mod.pick_fewshot(seeds, tag, n=2,
                                               rng_seed=config.rng_seed)
            exemplar_imgs = [bytes_for_seed(ex) for ex in exemplars]
            try:
                out.append(synth_mod.generate_question(
                    generator, ref, data, tag, exemplars, exemplar_imgs))
            except synth_mod.SynthesisError:
                errors += 1
        return out, len(chosen), errors, fallback

    results = _parallel_map(process, targets, ctx.config.synth_workers)
    candidates: list[synth_mod.CandidateQuestion] = []
    for out, attempted, errors, fallback in results:
        candidates.extend(out)
        stats["candidates_generated"] += attempted
        stats["generation_errors"] += errors
        stats["fallback_tag_images"] += fallback
    with open(ctx.path(A_CANDIDATES_RAW), "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(json.dumps(synth_mod.candidate_to_json(cand),
                                ensure_ascii=False) + "\n")
    _write_json(ctx.path(A_CANDIDATES_RAW_STATS), stats)


def _read_candidates(ctx: RunContext, name: str) -> list:
    out = []
    with open(ctx.path(name), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(synth_mod.candidate_from_json(json.loads(line),
                                                         ctx.taxonomy))
    return out


def stage_synth_judge(ctx: RunContext) -> None:
    candidates = _read_candidates(ctx, A_CANDIDATES_RAW)
    judge = ctx.gateway("judge")
    stats = synth_mod.SynthStats()

    def process(candidate):
        data = ctx.resolver.bytes_for(candidate.image.uri)
        return synth_mod.judge_relevance(judge, candidate, data, stats)

    judged = _parallel_map(process, candidates, ctx.config.synth_workers)
    relevant = sum(1 for c in judged if c.relevance == "relevant")
    with open(ctx.path(A_CANDIDATES), "w", encoding="utf-8") as fh:
        for cand in judged:
            fh.write(json.dumps(synth_mod.candidate_to_json(cand),
                                ensure_ascii=False) + "\n")
    _write_json(ctx.path(A_CANDIDATES_STATS), {
        "judged": len(judged),
        "relevant": relevant,
        "irrelevant": len(judged) - relevant,
        "unparseable_verdicts": stats.unparseable_verdicts,
    })


def stage_synth_answers(ctx: RunContext) -> None:
    candidates = [c for c in _read_candidates(ctx, A_CANDIDATES)
                  if c.relevance == "relevant"]
    generator = ctx.gateway("generator")
    config = ctx.synth_config()
    errors = 0

    def process(candidate):
        data = ctx.resolver.bytes_for(candidate.image.uri)
        style = synth_mod.choose_style(config, candidate.image.image_id,
                                       candidate.instruction_tag.path)
        try:
            return synth_mod.generate_answer(generator, candidate, style, data)
        except synth_mod.SynthesisError:
            return None

    results = _parallel_map(process, candidates, ctx.config.synth_workers)
    qas = []
    for qa in results:
        if qa is None:
            errors += 1
        else:
            qas.append(qa)
    with open(ctx.path(A_QA_UNSCORED), "w", encoding="utf-8") as fh:
        for qa in qas:
            fh.write(json.dumps(synth_mod.qa_to_json(qa),
                                ensure_ascii=False) + "\n")
    _write_json(ctx.path(A_QA_UNSCORED_STATS),
                {"relevant": len(candidates), "answered": len(qas),
                 "answer_errors": errors})


def _read_qas(ctx: RunContext, name: str) -> list:
    out = []
    with open(ctx.path(name), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(synth_mod.qa_from_json(json.loads(line), ctx.taxonomy))
    return out


def stage_synth_score(ctx: RunContext) -> None:
    qas = _read_qas(ctx, A_QA_UNSCORED)
    judge = ctx.gateway("judge")
    stats = synth_mod.SynthStats()

    def process(qa):
        data = ctx.resolver.bytes_for(qa.image.uri)
        return synth_mod.score_quality(judge, qa, data, stats)

    scored = [qa for qa in _parallel_map(process, qas, ctx.config.synth_workers)
              if qa is not None]
    retained = sum(1 for qa in scored
                   if qa.quality >= synth_mod.QUALITY_THRESHOLD)
    with open(ctx.path(A_QA_SCORED), "w", encoding="utf-8") as fh:
        for qa in scored:
            fh.write(json.dumps(synth_mod.qa_to_json(qa),
                                ensure_ascii=False) + "\n")
    _write_json(ctx.path(A_QA_SCORED_STATS), {
        "scored": len(scored),
        "unparseable_scores": stats.unparseable_scores,
        "retained": retained,
        "dropped_low_quality": len(scored) - retained,
        "quality_threshold": synth_mod.QUALITY_THRESHOLD,
    })


def stage_filter(ctx: RunContext) -> None:
    scorer = ctx.gateway("scorer")

    # synthetic QA site
    scored = _read_qas(ctx, A_QA_SCORED)
    retained = [qa for qa in scored
                if qa.quality is not None
                and qa.quality >= synth_mod.QUALITY_THRESHOLD]

    def qa_record(qa):
        return corpus_mod.make_record(
            image=qa.image, turns=[(qa.question, qa.answer)],
            source=synth_mod.SYNTHETIC_SOURCE,
            category=DataCategory.GPT4_AND_SYNTHETIC,
            subtype=SubType.SYNTHETIC,
            instruction_tags=[qa.instruction_tag.path],
            provenance=Provenance.SYNTHETIC)

    def score_qa(qa):
        return scorer.score_loss(qa_record(qa)).loss

    qa_losses = _parallel_map(score_qa, retained, ctx.config.synth_workers)
    loss_by_qa = {qa.qa_id: loss for qa, loss in zip(retained, qa_losses)}
    with open(ctx.path(A_QA_LOSSES), "w", encoding="utf-8") as fh:
        for qa in retained:
            fh.write(json.dumps({"record_id": qa.qa_id,
                                 "loss": loss_by_qa[qa.qa_id]}) + "\n")
    if retained:
        qa_kept, qa_stats = dedup_mod.loss_percentile_filter(
            retained, loss_by_qa, ctx.config.qa_loss_drop_fraction,
            id_of=lambda qa: qa.qa_id)
    else:
        qa_kept, qa_stats = [], dedup_mod.DedupStats()
    with open(ctx.path(A_QA_RETAINED), "w", encoding="utf-8") as fh:
        for qa in qa_kept:
            row = synth_mod.qa_to_json(qa)
            row["loss"] = loss_by_qa[qa.qa_id]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    # whole-corpus site
    records = read_records_jsonl(ctx.path(A_RECORDS_DEDUP))

    def score_record(rec):
        return scorer.score_loss(rec).loss

    rec_losses = _parallel_map(score_record, records, ctx.config.synth_workers)
    loss_by_record = {rec.record_id: loss
                      for rec, loss in zip(records, rec_losses)}
    dedup_mod.save_loss_table(
        ctx.path(A_CORPUS_LOSSES),
        [dedup_mod.LossScore(rid, loss) for rid, loss
         in sorted(loss_by_record.items())])
    if records:
        rec_kept, rec_stats = dedup_mod.loss_percentile_filter(
            records, loss_by_record, ctx.config.corpus_loss_drop_fraction)
    else:
        rec_kept, rec_stats = [], dedup_mod.DedupStats()
    write_records_jsonl(ctx.path(A_RECORDS_KEPT), rec_kept)
    _write_json(ctx.path(A_FILTER_STATS), {
        "synthetic_qa": {**qa_stats.__dict__,
                         "fraction": ctx.config.qa_loss_drop_fraction},
        "corpus": {**rec_stats.__dict__,
                   "fraction": ctx.config.corpus_loss_drop_fraction},
    })


def stage_assemble(ctx: RunContext) -> None:
    qas = _read_qas(ctx, A_QA_RETAINED)
    if ctx.config.synth_budget is not None:
        qas = synth_mod.prioritized_select(qas, ctx.config.synth_budget,
                                           ctx.config.synth_priority)
    records = synth_mod.assemble_multiturn(qas, ctx.config.synth_max_turns)
    write_records_jsonl(ctx.path(A_RECORDS_SYNTH), records)
    turn_count = sum(len(r.turns) for r in records)
    _write_json(ctx.path(A_RECORDS_SYNTH_STATS), {
        "input_qas": len(qas),
        "records": len(records),
        "turns": turn_count,
        "avg_turns_per_record": (turn_count / len(records)) if records else 0.0,
        "max_turns": ctx.config.synth_max_turns,
    })
    kept = read_records_jsonl(ctx.path(A_RECORDS_KEPT))
    write_records_jsonl(ctx.path(A_CORPUS_FINAL), kept + records)


# --- manifests --------------------------------------------------------------------

@dataclass(frozen=True)
class StageManifest:
    """One training stage's slice of the corpus."""

    stage: str
    categories: tuple[str, ...]
    sample_budget: int | None
    record_count: int
    shards: tuple[dict, ...]

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "categories": list(self.categories),
            "sample_budget": self.sample_budget,
            "record_count": self.record_count,
            "shards": [dict(s) for s in self.shards],
        }


def _hash_order_key(record: InstructionRecord) -> str:
    return hashlib.sha256(record.record_id.encode("ascii")).hexdigest()


def emit_manifests(
    records: Sequence[InstructionRecord],
    budgets: dict[str, int] | None = None,
    out_dir: str | Path | None = None,
) -> list[StageManifest]:
    """Partition categorized records into the six stage manifests.

    Records are ordered by a hash of their id; the Comprehensive pool is
    split into Stage2a/b/c round-robin in that order (thirds within one),
    and budgets truncate in the same order. With ``out_dir`` set, one
    JSONL shard per stage plus a manifest index are written there.
    """
    budgets = budgets or {}
    by_category: dict[DataCategory, list[InstructionRecord]] = {
        category: [] for category in DataCategory}
    for record in records:
        by_category[record.category].append(record)
    for category in by_category:
        by_category[category].sort(key=_hash_order_key)

    assignment: dict[str, list[InstructionRecord]] = {s: [] for s in STAGE_IDS}
    assignment["Stage1"] = by_category[DataCategory.IMAGE_CAPTION]
    for idx, record in enumerate(by_category[DataCategory.COMPREHENSIVE]):
        assignment[("Stage2a", "Stage2b", "Stage2c")[idx % 3]].append(record)
    assignment["Stage3"] = by_category[DataCategory.SELECTIVE]
    assignment["Stage4"] = by_category[DataCategory.GPT4_AND_SYNTHETIC]

    manifests: list[StageManifest] = []
    for stage in STAGE_IDS:
        rows = assignment[stage]
        budget = budgets.get(stage)
        if budget is not None:
            if budget > len(rows):
                logger.warning("stage %s budget %d exceeds available %d; "
                               "taking all", stage, budget, len(rows))
            rows = rows[:budget]
        if not rows:
            logger.warning("stage %s manifest is empty", stage)
        shards: list[dict] = []
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            shard_name = f"{stage.lower()}.jsonl"
            shard_path = out_dir / shard_name
            write_records_jsonl(shard_path, rows)
            shards.append({"path": shard_name,
                           "sha256": sha256_file(shard_path),
                           "records": len(rows)})
        manifests.append(StageManifest(
            stage=stage,
            categories=(_STAGE_CATEGORY[stage].value,),
            sample_budget=budget,
            record_count=len(rows),
            shards=tuple(shards),
        ))
    if out_dir is not None:
        _write_json(Path(out_dir) / "manifests.json",
                    {"stages": [m.to_json() for m in manifests]})
    return manifests


def stage_manifests(ctx: RunContext) -> None:
    records = read_records_jsonl(ctx.path(A_CORPUS_FINAL))
    emit_manifests(records, ctx.config.manifest_budgets,
                   ctx.run_dir / MANIFEST_DIR)


# --- report ------------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def build_report(ctx: RunContext) -> dict:
    records = read_records_jsonl(ctx.path(A_CORPUS_FINAL))
    stats = corpus_stats(records)
    manifest_index = _read_json(ctx.path(A_MANIFEST_INDEX))
    stage_counts = {m["stage"]: m["record_count"]
                    for m in manifest_index["stages"]}
    stage_total = sum(stage_counts.values())
    filters: dict[str, int] = {}
    ingest_stats = _read_json(ctx.path(A_INGEST_STATS))
    filters["ingest_rejected"] = ingest_stats["total"]["rejected"]
    dedup_stats = _read_json(ctx.path(A_DEDUP_STATS))
    filters["exact_duplicates_dropped"] = dedup_stats["exact"]["dropped"]
    filters["near_duplicates_dropped"] = dedup_stats["near_dup"]["dropped"]
    candidates_stats = _read_json(ctx.path(A_CANDIDATES_STATS))
    filters["irrelevant_questions_dropped"] = candidates_stats["irrelevant"]
    scored_stats = _read_json(ctx.path(A_QA_SCORED_STATS))
    filters["low_quality_dropped"] = scored_stats["dropped_low_quality"]
    filter_stats = _read_json(ctx.path(A_FILTER_STATS))
    filters["qa_loss_dropped"] = filter_stats["synthetic_qa"]["dropped"]
    filters["corpus_loss_dropped"] = filter_stats["corpus"]["dropped"]
    return {
        "run_id": ctx.config.run_id,
        "seed": ctx.config.seed,
        "totals": {"records": stats.total},
        "stages": {
            "counts": dict(sorted(stage_counts.items())),
            "fractions": {stage: (count / stage_total if stage_total else 0.0)
                          for stage, count in sorted(stage_counts.items())},
        },
        "categories": stats.to_json(),
        "filters": dict(sorted(filters.items())),
    }


def _render_report_text(report: dict) -> str:
    lines: list[str] = []
    lines.append(f"run {report['run_id']} (seed {report['seed']})")
    lines.append(f"final records: {report['totals']['records']}")
    lines.append("")

    def table(title: str, counts: dict, fractions: dict | None = None):
        lines.append(title)
        width = max([len(k) for k in counts] + [8])
        for key in sorted(counts):
            row = f"  {key:<{width}}  {counts[key]:>8}"
            if fractions and key in fractions:
                row += f"  {fractions[key]:>8.4f}"
            lines.append(row)
        if not counts:
            lines.append("  (empty)")
        lines.append("")

    table("records per training stage", report["stages"]["counts"],
          report["stages"]["fractions"])
    table("records per category", report["categories"]["counts"]["category"],
          report["categories"]["fractions"]["category"])
    table("records per sub-type", report["categories"]["counts"]["subtype"],
          report["categories"]["fractions"]["subtype"])
    table("tagged records per first-level tag",
          report["categories"]["counts"]["first_level_tag"],
          report["categories"]["fractions"]["first_level_tag"])
    table("drops per filter", report["filters"])
    return "\n".join(lines)


def stage_report(ctx: RunContext) -> None:
    report = build_report(ctx)
    _write_json(ctx.path(A_REPORT_JSON), report)
    ctx.path(A_REPORT_TXT).write_text(_render_report_text(report),
                                      encoding="utf-8")


# --- stage graph and runner -----------------------------------------------------------

@dataclass(frozen=True)
class StageDef:
    name: str
    fn: Callable[[RunContext], None]
    inputs: Callable[[RunContext], list[Path]]
    outputs: tuple[str, ...]


STAGES: tuple[StageDef, ...] = (
    StageDef("ingest", stage_ingest,
             lambda ctx: [e.path for e in ctx.config.sources],
             (A_RECORDS_RAW, A_INGEST_STATS)),
    StageDef("dedup", stage_dedup,
             lambda ctx: [ctx.path(A_RECORDS_RAW)],
             (A_HASH_CACHE, A_RECORDS_DEDUP, A_DEDUP_STATS)),
    StageDef("tagmap", stage_tagmap,
             lambda ctx: [ctx.path(A_RECORDS_DEDUP)],
             (A_IMAGE_TAGS, A_MAPPING, A_TAGMAP_STATS)),
    StageDef("synth_questions", stage_synth_questions,
             lambda ctx: [ctx.path(A_RECORDS_DEDUP), ctx.path(A_MAPPING),
                          ctx.path(A_IMAGE_TAGS)],
             (A_CANDIDATES_RAW, A_CANDIDATES_RAW_STATS)),
    StageDef("synth_judge", stage_synth_judge,
             lambda ctx: [ctx.path(A_CANDIDATES_RAW)],
             (A_CANDIDATES, A_CANDIDATES_STATS)),
    StageDef("synth_answers", stage_synth_answers,
             lambda ctx: [ctx.path(A_CANDIDATES)],
             (A_QA_UNSCORED, A_QA_UNSCORED_STATS)),
    StageDef("synth_score", stage_synth_score,
             lambda ctx: [ctx.path(A_QA_UNSCORED)],
             (A_QA_SCORED, A_QA_SCORED_STATS)),
    StageDef("filter", stage_filter,
             lambda ctx: [ctx.path(A_QA_SCORED), ctx.path(A_RECORDS_DEDUP)],
             (A_QA_LOSSES, A_QA_RETAINED, A_CORPUS_LOSSES, A_RECORDS_KEPT,
              A_FILTER_STATS)),
    StageDef("assemble", stage_assemble,
             lambda ctx: [ctx.path(A_QA_RETAINED), ctx.path(A_RECORDS_KEPT)],
             (A_RECORDS_SYNTH, A_RECORDS_SYNTH_STATS, A_CORPUS_FINAL)),
    StageDef("manifests", stage_manifests,
             lambda ctx: [ctx.path(A_CORPUS_FINAL)],
             (A_MANIFEST_INDEX,)),
    StageDef("report", stage_report,
             lambda ctx: [ctx.path(A_CORPUS_FINAL), ctx.path(A_MANIFEST_INDEX)],
             (A_REPORT_JSON, A_REPORT_TXT)),
)

STAGE_NAMES = tuple(s.name for s in STAGES)


@dataclass
class RunSummary:
    run_id: str
    run_dir: Path
    executed: list[str]
    skipped: list[str]
    artifact_digests: dict[str, str]


def _input_digests(ctx: RunContext, stage: StageDef) -> dict[str, str]:
    digests = {"__config__": ctx.config.fingerprint(),
               "__seed__": str(ctx.config.seed)}
    for path in stage.inputs(ctx):
        digests[path.name] = sha256_file(path) if path.exists() else "missing"
    return digests


def _output_digests(ctx: RunContext, stage: StageDef) -> dict[str, str]:
    out = {}
    for name in stage.outputs:
        path = ctx.path(name)
        out[name] = sha256_file(path) if path.exists() else "missing"
    return out


def execute_stage(ctx: RunContext, stage: StageDef, force: bool = False) -> bool:
    """Run one stage unless its checkpoint says it is done and unchanged.

    Returns True when the stage executed, False when skipped.
    """
    checkpoint = ctx.checkpoint
    assert checkpoint is not None
    entry = checkpoint.stage(stage.name)
    current_inputs = _input_digests(ctx, stage)
    if (not force and entry["status"] == "done"
            and entry["inputs"] == current_inputs
            and entry["outputs"] == _output_digests(ctx, stage)
            and "missing" not in entry["outputs"].values()):
        logger.info("stage %s unchanged; skipping", stage.name)
        return False
    entry["status"] = "running"
    entry["inputs"] = current_inputs
    checkpoint.save(ctx.run_dir)
    try:
        stage.fn(ctx)
    except Exception as exc:
        entry["status"] = "pending"
        checkpoint.save(ctx.run_dir)
        raise StageFailure(stage.name, exc) from exc
    entry["status"] = "done"
    entry["outputs"] = _output_digests(ctx, stage)
    checkpoint.save(ctx.run_dir)
    return True


def collect_artifact_digests(run_dir: Path) -> dict[str, str]:
    """Digest every artifact under the run dir except the checkpoint."""
    digests: dict[str, str] = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_dir() or path.name == CHECKPOINT_FILE:
            continue
        if path.name == "digests.json":
            continue
        digests[str(path.relative_to(run_dir))] = sha256_file(path)
    return digests


def run(config: PipelineConfig, stages: Iterable[str] | None = None,
        force: bool = False) -> RunSummary:
    """Execute the pipeline (or a subset of stages) under a checkpoint.

    Raises ConfigError for validation problems and StageFailure when a
    stage raises; in the latter case the checkpoint on disk allows a
    later ``resume`` to pick up where the run stopped.
    """
    check_endpoints_reachable(config)
    selected = tuple(stages) if stages is not None else STAGE_NAMES
    for name in selected:
        if name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {name!r}; valid: {list(STAGE_NAMES)}")
    ctx = RunContext(config)
    executed: list[str] = []
    skipped: list[str] = []
    with ctx:
        checkpoint_path = ctx.run_dir / CHECKPOINT_FILE
        if checkpoint_path.exists():
            ctx.checkpoint = Checkpoint.load(ctx.run_dir)
        else:
            ctx.checkpoint = Checkpoint(
                run_id=config.run_id,
                seed=config.seed,
                config_fingerprint=config.fingerprint(),
                config_snapshot=config.to_snapshot(),
            )
            ctx.checkpoint.save(ctx.run_dir)
        for stage in STAGES:
            if stage.name not in selected:
                continue
            if execute_stage(ctx, stage, force=force):
                executed.append(stage.name)
            else:
                skipped.append(stage.name)
    digests = collect_artifact_digests(ctx.run_dir)
    _write_json(ctx.run_dir / "digests.json", digests)
    return RunSummary(run_id=config.run_id, run_dir=ctx.run_dir,
                      executed=executed, skipped=skipped,
                      artifact_digests=digests)


def resume(run_dir: str | Path, stages: Iterable[str] | None = None) -> RunSummary:
    """Resume a previous run from its checkpointed config snapshot."""
    run_dir = Path(run_dir)
    checkpoint = Checkpoint.load(run_dir)
    config = PipelineConfig.from_snapshot(checkpoint.config_snapshot)
    return run(config, stages=stages)
