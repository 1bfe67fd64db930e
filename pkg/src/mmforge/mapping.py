"""Image-tag to instruction-tag co-occurrence model with TF-IDF weights.

Each instruction tag is one unit ("document") whose terms are the image
tags of its seed examples. Weights are the smoothed TF-IDF

    tf(t, u)  = count(t, u) / unit_total(u)
    idf(t)    = ln((1 + U) / (1 + df(t))) + 1
    w(t, u)   = tf(t, u) * idf(t)

where U is the number of non-empty units and df(t) the number of units
in which tag t occurs. idf is always >= 1, so no tag is ever zeroed out
of a unit that contains it.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import ImageRef
from .taxonomy import InstructionTag, Taxonomy, load_taxonomy

FORMULA_VERSION = "tfidf-smooth-1"
DEFAULT_TOP_K = 3


class MappingError(ValueError):
    """Raised for empty count tables or malformed mapping files."""


class Aggregation(enum.Enum):
    """How per-tag weights combine into a unit score for a new image."""

    SUM = "sum"
    MEAN = "mean"
    MAX = "max"


@dataclass(frozen=True)
class SeedExample:
    """One annotated seed record: image tags plus its instruction tag."""

    image: ImageRef
    image_tags: frozenset[str]
    question: str
    answer: str
    instruction_tag: InstructionTag
    example_id: str = ""

    def __post_init__(self):
        if not self.image_tags:
            raise MappingError("seed example must have at least one image tag")
        if not self.example_id:
            digest = hashlib.sha256(
                f"{self.image.image_id}|{self.question}|{self.answer}"
                .encode("utf-8")).hexdigest()[:16]
            object.__setattr__(self, "example_id", digest)


@dataclass
class CountTable:
    """Per-unit image-tag counts plus the derived df / U statistics."""

    counts: dict[InstructionTag, dict[str, int]] = field(default_factory=dict)

    def unit_total(self, unit: InstructionTag) -> int:
        return sum(self.counts.get(unit, {}).values())

    @property
    def units(self) -> int:
        """Number of units with at least one counted tag."""
        return sum(1 for tags in self.counts.values() if tags)

    def document_frequency(self, tag: str) -> int:
        return sum(1 for tags in self.counts.values() if tags.get(tag, 0) > 0)

    def merge(self, other: "CountTable") -> "CountTable":
        """Associative, commutative merge of shard-level tables."""
        merged = CountTable()
        for table in (self, other):
            for unit, tags in table.counts.items():
                slot = merged.counts.setdefault(unit, {})
                for tag, n in tags.items():
                    slot[tag] = slot.get(tag, 0) + n
        return merged


@dataclass(frozen=True)
class MappingTable:
    """Immutable TF-IDF weights per instruction tag."""

    weights: dict[InstructionTag, dict[str, float]]
    counts: dict[InstructionTag, dict[str, int]]
    units: int
    formula_version: str = FORMULA_VERSION

    def weight(self, tag: str, unit: InstructionTag) -> float:
        return self.weights.get(unit, {}).get(tag, 0.0)


def count_cooccurrence(seed: Iterable[SeedExample]) -> CountTable:
    """Count image tags per instruction tag, set semantics per example."""
    table = CountTable()
    for example in seed:
        slot = table.counts.setdefault(example.instruction_tag, {})
        for tag in set(example.image_tags):
            slot[tag] = slot.get(tag, 0) + 1
    return table


def compute_tfidf(counts: CountTable) -> MappingTable:
    """Turn a count table into TF-IDF weights; requires at least one unit."""
    units = counts.units
    if units == 0:
        raise MappingError("cannot compute TF-IDF over an empty count table")
    weights: dict[InstructionTag, dict[str, float]] = {}
    for unit, tags in counts.counts.items():
        total = sum(tags.values())
        if total == 0:
            continue
        row: dict[str, float] = {}
        for tag, n in tags.items():
            tf = n / total
            idf = math.log((1 + units) / (1 + counts.document_frequency(tag))) + 1.0
            row[tag] = tf * idf
        weights[unit] = row
    frozen_counts = {unit: dict(tags) for unit, tags in counts.counts.items() if tags}
    return MappingTable(weights=weights, counts=frozen_counts, units=units)


def select_instruction_types(
    image_tags: Iterable[str],
    mapping: MappingTable,
    k: int = DEFAULT_TOP_K,
    aggregation: Aggregation = Aggregation.SUM,
) -> list[tuple[InstructionTag, float]]:
    """Top-k instruction tags for an image's tag set.

    Scores are the aggregation of w(t, u) over the image's tags; only
    units with score > 0 are returned, sorted by descending score with
    ties broken by ascending tag path.
    """
    if k < 0:
        raise MappingError(f"k must be >= 0, got {k}")
    tags = set(image_tags)
    scored: list[tuple[InstructionTag, float]] = []
    for unit, row in mapping.weights.items():
        overlap = [row[t] for t in tags if t in row]
        if not overlap:
            continue
        if aggregation is Aggregation.SUM:
            score = sum(overlap)
        elif aggregation is Aggregation.MEAN:
            score = sum(overlap) / len(tags)
        else:
            score = max(overlap)
        if score > 0:
            scored.append((unit, score))
    scored.sort(key=lambda item: (-item[1], item[0].path))
    return scored[:k]


def save_mapping(mapping: MappingTable, path: str | Path) -> None:
    """Write a mapping as JSONL: one header line, then one row per weight.

    Floats serialize via the shortest round-trip decimal form, so
    save -> load reproduces weights bit-exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"U": mapping.units,
                             "formula_version": mapping.formula_version}) + "\n")
        rows = []
        for unit, row in mapping.weights.items():
            for tag, w in row.items():
                rows.append((unit.path, tag, mapping.counts[unit][tag], w))
        rows.sort(key=lambda r: (r[0], r[1]))
        for unit_path, tag, count, w in rows:
            fh.write(json.dumps({"unit_path": unit_path, "tag": tag,
                                 "count": count, "weight": w},
                                ensure_ascii=False) + "\n")


def load_mapping(path: str | Path, taxonomy: Taxonomy | None = None) -> MappingTable:
    """Load a mapping file; unit paths resolve against ``taxonomy``."""
    if taxonomy is None:
        taxonomy = load_taxonomy()
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
    except OSError as exc:
        raise MappingError(f"cannot read mapping file: {exc}") from exc
    if not lines:
        raise MappingError("malformed mapping file: missing header")
    try:
        header = json.loads(lines[0])
        units = int(header["U"])
        version = header["formula_version"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MappingError(f"malformed mapping header: {exc}") from exc
    weights: dict[InstructionTag, dict[str, float]] = {}
    counts: dict[InstructionTag, dict[str, int]] = {}
    for line in lines[1:]:
        try:
            row = json.loads(line)
            unit = taxonomy.resolve(row["unit_path"])
            tag, count, w = row["tag"], int(row["count"]), float(row["weight"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MappingError(f"malformed mapping row: {line!r} ({exc})") from exc
        weights.setdefault(unit, {})[tag] = w
        counts.setdefault(unit, {})[tag] = count
    return MappingTable(weights=weights, counts=counts, units=units,
                        formula_version=version)


def seed_examples_from_records(
    records: Sequence,
    image_tags_by_id: Mapping[str, Iterable[str]],
    taxonomy: Taxonomy,
) -> list[SeedExample]:
    """Build seed examples from annotated records plus an image-tag table.

    Uses each record's first turn; records without an image, without
    instruction tags, or without tagging output are skipped.
    """
    seeds: list[SeedExample] = []
    for rec in records:
        if rec.image is None or not rec.instruction_tags:
            continue
        tags = frozenset(image_tags_by_id.get(rec.image.image_id, ()))
        if not tags:
            continue
        question, answer = rec.turns[0].question, rec.turns[0].answer
        for tag_path in rec.instruction_tags:
            seeds.append(SeedExample(
                image=rec.image,
                image_tags=tags,
                question=question,
                answer=answer,
                instruction_tag=taxonomy.resolve(tag_path),
            ))
    return seeds
