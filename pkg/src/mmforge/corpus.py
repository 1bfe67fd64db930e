"""Unified record schema, source adapters, ingestion, and corpus stats.

Heterogeneous source rows are normalized into ``InstructionRecord``: one
image-optional, multi-turn conversation with a source name, a category
assignment taken from the source registration (not from content), and an
optional list of instruction-tag paths. The JSONL wire format is frozen;
field names are pinned by golden files in the test suite.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from . import images

logger = logging.getLogger(__name__)

#: Question used when a caption source provides only the caption text.
CAPTION_PROMPT = "Describe the image in detail."


class CorpusError(ValueError):
    """Raised for unmappable rows, bad categories, or malformed files."""


class DataCategory(enum.Enum):
    IMAGE_CAPTION = "ImageCaption"
    COMPREHENSIVE = "Comprehensive"
    SELECTIVE = "Selective"
    GPT4_AND_SYNTHETIC = "Gpt4AndSynthetic"


class SubType(enum.Enum):
    GENERAL_INSTRUCTION = "GeneralInstruction"
    OCR = "OCR"
    DOC_CHART_SCREEN = "DocChartScreen"
    MATH_REASONING = "MathReasoning"
    TEXT_INSTRUCTION = "TextInstruction"
    SYNTHETIC = "Synthetic"
    CAPTION = "Caption"


class Provenance(enum.Enum):
    COLLECTED = "collected"
    SYNTHETIC = "synthetic"
    GPT4_DISTILLED = "gpt4-distilled"


def _check_category(category: DataCategory, subtype: SubType) -> None:
    if category is DataCategory.IMAGE_CAPTION and subtype is not SubType.CAPTION:
        raise CorpusError("ImageCaption records must have sub-type Caption")
    if subtype is SubType.SYNTHETIC and category is not DataCategory.GPT4_AND_SYNTHETIC:
        raise CorpusError("Synthetic sub-type only allowed under Gpt4AndSynthetic")


@dataclass(frozen=True, slots=True)
class ImageRef:
    """Stable reference to decoded image content."""

    image_id: str
    uri: str
    width: int
    height: int
    format: str

    def __post_init__(self):
        if self.format not in images.SUPPORTED_FORMATS:
            raise CorpusError(f"unsupported image format: {self.format!r}")


@dataclass(frozen=True, slots=True)
class Turn:
    question: str
    answer: str


@dataclass(frozen=True, slots=True)
class InstructionRecord:
    """The pipeline's unified output unit: one multi-turn conversation."""

    record_id: str
    image: ImageRef | None
    turns: tuple[Turn, ...]
    source: str
    category: DataCategory
    subtype: SubType
    instruction_tags: tuple[str, ...]
    provenance: Provenance

    def __post_init__(self):
        if not self.turns:
            raise CorpusError("record must have at least one turn")
        for turn in self.turns:
            if not turn.question.strip() or not turn.answer.strip():
                raise CorpusError("every question and answer must be non-empty")
        _check_category(self.category, self.subtype)
        if self.provenance is Provenance.SYNTHETIC and not self.instruction_tags:
            raise CorpusError("synthetic records must carry instruction tags")


def compute_record_id(image_id: str | None, turns: Iterable[Turn],
                      source: str) -> str:
    """Deterministic content id over image identity, turns, and source."""
    payload = json.dumps(
        [image_id or "", [[t.question, t.answer] for t in turns], source],
        ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def make_record(
    *,
    image: ImageRef | None,
    turns: Iterable[tuple[str, str]] | Iterable[Turn],
    source: str,
    category: DataCategory,
    subtype: SubType,
    instruction_tags: Iterable[str] = (),
    provenance: Provenance = Provenance.COLLECTED,
) -> InstructionRecord:
    """Trim turns, derive the record id, and construct a validated record."""
    clean: list[Turn] = []
    for turn in turns:
        if isinstance(turn, Turn):
            q, a = turn.question, turn.answer
        else:
            q, a = turn
        clean.append(Turn(q.strip(), a.strip()))
    record_id = compute_record_id(image.image_id if image else None, clean, source)
    return InstructionRecord(
        record_id=record_id,
        image=image,
        turns=tuple(clean),
        source=source,
        category=category,
        subtype=subtype,
        instruction_tags=tuple(instruction_tags),
        provenance=provenance,
    )


# --- source adapters --------------------------------------------------------

# An adapter maps one raw source row to the intermediate shape
#   {"turns": [(q, a), ...], "image": <raw image value or None>,
#    "instruction_tags": [...], "provenance": Provenance | None}
Adapter = Callable[[dict], dict]


def _adapt_qa(raw: dict) -> dict:
    question, answer = raw.get("question"), raw.get("answer")
    if not question or not answer:
        raise CorpusError("qa row needs non-empty 'question' and 'answer'")
    return {"turns": [(question, answer)], "image": raw.get("image"),
            "instruction_tags": raw.get("instruction_tags", [])}


def _adapt_caption(raw: dict) -> dict:
    caption = raw.get("caption")
    if not caption:
        raise CorpusError("caption row needs a non-empty 'caption'")
    if raw.get("image") is None:
        raise CorpusError("caption row needs an 'image'")
    return {"turns": [(CAPTION_PROMPT, caption)], "image": raw["image"],
            "instruction_tags": []}


def _adapt_conversations(raw: dict) -> dict:
    convo = raw.get("conversations")
    if not convo:
        raise CorpusError("conversations row needs a non-empty 'conversations'")
    turns: list[tuple[str, str]] = []
    pending: str | None = None
    for msg in convo:
        role, value = msg.get("from"), msg.get("value", "")
        if role == "human":
            pending = value
        elif role == "gpt":
            if pending is None:
                raise CorpusError("assistant turn without a preceding question")
            turns.append((pending, value))
            pending = None
        else:
            raise CorpusError(f"unknown conversation role: {role!r}")
    if not turns:
        raise CorpusError("conversation contains no complete turn")
    return {"turns": turns, "image": raw.get("image"),
            "instruction_tags": raw.get("instruction_tags", [])}


def _adapt_text_instruction(raw: dict) -> dict:
    question = raw.get("question") or raw.get("instruction")
    answer = raw.get("answer") or raw.get("response")
    if not question or not answer:
        raise CorpusError("text row needs instruction/question and answer/response")
    return {"turns": [(question, answer)], "image": None,
            "instruction_tags": raw.get("instruction_tags", [])}


ADAPTERS: dict[str, Adapter] = {
    "qa": _adapt_qa,
    "caption": _adapt_caption,
    "conversations": _adapt_conversations,
    "text_instruction": _adapt_text_instruction,
}


@dataclass(frozen=True)
class SourceSpec:
    """Registration of one source dataset: adapter plus default category."""

    name: str
    adapter: str
    default_category: DataCategory
    default_subtype: SubType
    provenance: Provenance = Provenance.COLLECTED

    def __post_init__(self):
        if self.adapter not in ADAPTERS:
            raise CorpusError(
                f"unknown adapter {self.adapter!r}; registered: "
                f"{sorted(ADAPTERS)}")
        _check_category(self.default_category, self.default_subtype)


class ImageResolver:
    """Resolves raw image references (uris) to ImageRef via decoded bytes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, ImageRef] = {}

    def bytes_for(self, uri: str) -> bytes:
        path = self.root / uri
        try:
            return path.read_bytes()
        except OSError as exc:
            raise CorpusError(f"cannot read image {uri!r}: {exc}") from exc

    def resolve(self, uri: str) -> ImageRef:
        if uri in self._cache:
            return self._cache[uri]
        data = self.bytes_for(uri)
        img = images.decode_image(data)
        ref = ImageRef(
            image_id=images.image_id_of(data),
            uri=uri,
            width=img.width,
            height=img.height,
            format=images.canonical_format(img),
        )
        self._cache[uri] = ref
        return ref


def _resolve_image(raw_image, resolver: ImageResolver | None) -> ImageRef | None:
    if raw_image is None:
        return None
    if isinstance(raw_image, dict):
        try:
            return ImageRef(
                image_id=raw_image["image_id"], uri=raw_image["uri"],
                width=int(raw_image["width"]), height=int(raw_image["height"]),
                format=raw_image["format"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"bad inline image object: {exc}") from exc
    if resolver is None:
        raise CorpusError(
            f"image reference {raw_image!r} requires an image resolver")
    return resolver.resolve(str(raw_image))


def normalize_record(
    raw: dict,
    spec: SourceSpec,
    resolver: ImageResolver | None = None,
) -> InstructionRecord:
    """Normalize one raw source row into an InstructionRecord.

    Category and sub-type come from the source spec unless the row carries
    explicit "category"/"subtype" overrides. Raises CorpusError for rows
    that cannot be mapped (missing question/answer, bad image reference).
    """
    adapted = ADAPTERS[spec.adapter](raw)
    try:
        category = (DataCategory(raw["category"]) if "category" in raw
                    else spec.default_category)
        subtype = (SubType(raw["subtype"]) if "subtype" in raw
                   else spec.default_subtype)
    except ValueError as exc:
        raise CorpusError(f"bad category override: {exc}") from exc
    provenance = adapted.get("provenance") or spec.provenance
    return make_record(
        image=_resolve_image(adapted.get("image"), resolver),
        turns=adapted["turns"],
        source=spec.name,
        category=category,
        subtype=subtype,
        instruction_tags=adapted.get("instruction_tags", ()),
        provenance=provenance,
    )


@dataclass
class IngestStats:
    """Per-shard counters; read = emitted + rejected always holds."""

    read: int = 0
    emitted: int = 0
    rejected: int = 0

    def __add__(self, other: "IngestStats") -> "IngestStats":
        return IngestStats(self.read + other.read, self.emitted + other.emitted,
                           self.rejected + other.rejected)


def ingest(
    lines: Iterable[str],
    spec: SourceSpec,
    resolver: ImageResolver | None = None,
    stats: IngestStats | None = None,
) -> Iterator[InstructionRecord]:
    """Stream-normalize a shard of line-delimited rows.

    Emits records in input order. Malformed or unmappable rows are counted
    as rejected and skipped; I/O failure of the underlying stream aborts
    the shard by propagating. Pass a stats object to collect counters.
    """
    if stats is None:
        stats = IngestStats()
    for line in lines:
        if not line.strip():
            continue
        stats.read += 1
        try:
            raw = json.loads(line)
            record = normalize_record(raw, spec, resolver)
        except (json.JSONDecodeError, CorpusError, images.ImageDecodeError) as exc:
            stats.rejected += 1
            logger.debug("rejected row from %s: %s", spec.name, exc)
            continue
        stats.emitted += 1
        yield record


def ingest_file(
    path: str | Path,
    spec: SourceSpec,
    resolver: ImageResolver | None = None,
) -> tuple[list[InstructionRecord], IngestStats]:
    """Ingest one JSONL shard file; returns (records, stats)."""
    stats = IngestStats()
    with open(path, encoding="utf-8") as fh:
        records = list(ingest(fh, spec, resolver, stats))
    return records, stats


# --- wire format -------------------------------------------------------------

def record_to_json(record: InstructionRecord) -> dict:
    """Frozen JSONL field layout for the unified record format."""
    image = None
    if record.image is not None:
        image = {
            "image_id": record.image.image_id,
            "uri": record.image.uri,
            "width": record.image.width,
            "height": record.image.height,
            "format": record.image.format,
        }
    return {
        "record_id": record.record_id,
        "image": image,
        "turns": [{"question": t.question, "answer": t.answer}
                  for t in record.turns],
        "source": record.source,
        "category": record.category.value,
        "subtype": record.subtype.value,
        "instruction_tags": list(record.instruction_tags),
        "provenance": record.provenance.value,
    }


def record_from_json(obj: dict) -> InstructionRecord:
    image = None
    if obj.get("image") is not None:
        i = obj["image"]
        image = ImageRef(image_id=i["image_id"], uri=i["uri"],
                         width=i["width"], height=i["height"],
                         format=i["format"])
    return InstructionRecord(
        record_id=obj["record_id"],
        image=image,
        turns=tuple(Turn(t["question"], t["answer"]) for t in obj["turns"]),
        source=obj["source"],
        category=DataCategory(obj["category"]),
        subtype=SubType(obj["subtype"]),
        instruction_tags=tuple(obj.get("instruction_tags", ())),
        provenance=Provenance(obj["provenance"]),
    )


def write_records_jsonl(path: str | Path, records: Iterable[InstructionRecord]) -> int:
    """Write records as UTF-8 JSONL; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_records_jsonl(path: str | Path) -> list[InstructionRecord]:
    out: list[InstructionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(record_from_json(json.loads(line)))
    return out


# --- corpus statistics --------------------------------------------------------

@dataclass
class StatsReport:
    """Counts and fractions by category, sub-type, and first-level tag."""

    by_category: Counter = field(default_factory=Counter)
    by_subtype: Counter = field(default_factory=Counter)
    by_first_level: Counter = field(default_factory=Counter)
    total: int = 0

    def __add__(self, other: "StatsReport") -> "StatsReport":
        return StatsReport(
            by_category=self.by_category + other.by_category,
            by_subtype=self.by_subtype + other.by_subtype,
            by_first_level=self.by_first_level + other.by_first_level,
            total=self.total + other.total,
        )

    @staticmethod
    def _fractions(counter: Counter) -> dict[str, float]:
        denom = sum(counter.values())
        if denom == 0:
            return {}
        return {key: counter[key] / denom for key in sorted(counter)}

    def fractions_by_category(self) -> dict[str, float]:
        return self._fractions(self.by_category)

    def fractions_by_subtype(self) -> dict[str, float]:
        return self._fractions(self.by_subtype)

    def fractions_by_first_level(self) -> dict[str, float]:
        return self._fractions(self.by_first_level)

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "counts": {
                "category": dict(sorted(self.by_category.items())),
                "subtype": dict(sorted(self.by_subtype.items())),
                "first_level_tag": dict(sorted(self.by_first_level.items())),
            },
            "fractions": {
                "category": self.fractions_by_category(),
                "subtype": self.fractions_by_subtype(),
                "first_level_tag": self.fractions_by_first_level(),
            },
        }


def corpus_stats(records: Iterable[InstructionRecord]) -> StatsReport:
    """Exact counts plus per-partition fractions over a record stream.

    Tagged records contribute once to each distinct first-level category
    among their instruction tags.
    """
    report = StatsReport()
    for record in records:
        report.total += 1
        report.by_category[record.category.value] += 1
        report.by_subtype[record.subtype.value] += 1
        levels = {path.split("/", 1)[0] for path in record.instruction_tags}
        for level in levels:
            report.by_first_level[level] += 1
    return report
