"""Instruction synthesis: questions, relevance gate, styled answers,
quality scoring, prioritized selection, and multi-turn assembly.

The flow per image: pick instruction types from the TF-IDF mapping, draw
few-shot exemplars of the same type, generate one question per type,
judge its relevance to the image (fail closed), answer it in one of three
styles, then have the judge rate quality 1..10. Only relevant QAs rated
at or above the threshold survive. Survivors are later loss-filtered and
chunked into multi-turn records, one conversation per image chunk.
"""

from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

from .corpus import (DataCategory, ImageRef, InstructionRecord, Provenance,
                     SubType, make_record)
from .gateway import (ChatRequest, Gateway, ScoreParseError, load_prompt,
                      parse_score_1_10, parse_verdict)
from .mapping import Aggregation, MappingTable, SeedExample, select_instruction_types
from .taxonomy import InstructionTag, Taxonomy

logger = logging.getLogger(__name__)

QUALITY_THRESHOLD = 8
DEFAULT_MAX_TURNS = 5
DEFAULT_PRIORITY_CATEGORIES = (
    "Logic Reasoning",
    "Relation Reasoning",
    "Attribute Reasoning",
)

SYNTHETIC_SOURCE = "synthetic"


class SynthesisError(RuntimeError):
    """Raised for empty generations and other per-candidate failures."""


class Style(Enum):
    SHORT = "Short"
    BRIEF_EXPLAIN = "BriefExplain"
    DETAILED_EXPLAIN = "DetailedExplain"


_STYLE_PROMPTS = {
    Style.SHORT: "answer_short",
    Style.BRIEF_EXPLAIN: "answer_brief_explain",
    Style.DETAILED_EXPLAIN: "answer_detailed_explain",
}


@dataclass(frozen=True)
class CandidateQuestion:
    image: ImageRef
    instruction_tag: InstructionTag
    question: str
    exemplar_ids: tuple[str, ...] = ()
    relevance: str | None = None  # "relevant" | "irrelevant"

    def __post_init__(self):
        if not self.question.strip():
            raise SynthesisError("candidate question must be non-empty")
        if len(self.exemplar_ids) > 2:
            raise SynthesisError("at most two exemplars per candidate")


@dataclass(frozen=True)
class SynthQA:
    image: ImageRef
    instruction_tag: InstructionTag
    question: str
    answer: str
    style: Style
    quality: int | None = None
    loss: float | None = None

    @property
    def qa_id(self) -> str:
        raw = f"{self.image.image_id}|{self.question}|{self.answer}|{self.style.value}"
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]


@dataclass
class SynthStats:
    """Pipeline conservation counters.

    candidates_generated = relevant + irrelevant + generation_errors,
    and retained <= relevant, always.
    """

    images: int = 0
    fallback_tag_images: int = 0
    candidates_generated: int = 0
    generation_errors: int = 0
    relevant: int = 0
    irrelevant: int = 0
    unparseable_verdicts: int = 0
    answer_errors: int = 0
    unparseable_scores: int = 0
    dropped_low_quality: int = 0
    retained: int = 0

    def to_json(self) -> dict:
        return dict(sorted(self.__dict__.items()))


def derive_seed(base: int, *parts: str) -> int:
    """Stable 64-bit sub-seed from a base seed and string context."""
    raw = hashlib.sha256(("%d::" % base + "::".join(parts)).encode("utf-8"))
    return int.from_bytes(raw.digest()[:8], "big")


def pick_fewshot(seed_examples: Sequence[SeedExample], tag: InstructionTag,
                 n: int = 2, rng_seed: int = 0) -> list[SeedExample]:
    """Sample n distinct same-type exemplars, deterministic per seed."""
    pool = [ex for ex in seed_examples if ex.instruction_tag == tag]
    if len(pool) <= n:
        return list(pool)
    rng = random.Random(derive_seed(rng_seed, "fewshot", tag.path))
    return rng.sample(pool, n)


def _exemplar_block(exemplars: Sequence[SeedExample]) -> str:
    if not exemplars:
        return ""
    lines = ["Example questions of the same instruction type:"]
    for i, ex in enumerate(exemplars, start=1):
        lines.append(f"{i}. {ex.question}")
    return "\n".join(lines)


def trim_question(text: str) -> str:
    """First line ending in '?' if there is one, else the full trimmed body."""
    body = text.strip()
    lines = [line.strip() for line in body.splitlines() if line.strip()]
    if lines and lines[0].endswith("?"):
        return lines[0]
    return body


def generate_question(
    gateway: Gateway,
    image: ImageRef,
    image_bytes: bytes,
    tag: InstructionTag,
    exemplars: Sequence[SeedExample] = (),
    exemplar_bytes: Sequence[bytes] = (),
) -> CandidateQuestion:
    """Generate one question of the given instruction type for an image."""
    template = load_prompt("question_gen", require={"instruction_type", "exemplars"})
    prompt = template.render(instruction_type=tag.path,
                             exemplars=_exemplar_block(exemplars))
    request = ChatRequest.user(prompt, images=[image_bytes, *exemplar_bytes])
    response = gateway.call(request)
    question = trim_question(response.text)
    if not question:
        raise SynthesisError(f"empty question generation for {image.image_id}")
    return CandidateQuestion(
        image=image,
        instruction_tag=tag,
        question=question,
        exemplar_ids=tuple(ex.example_id for ex in exemplars),
    )


def judge_relevance(gateway: Gateway, candidate: CandidateQuestion,
                    image_bytes: bytes, stats: SynthStats | None = None
                    ) -> CandidateQuestion:
    """Binary relevance gate; unparseable verdicts fail closed."""
    template = load_prompt("relevance_judge", require={"question"})
    request = ChatRequest.user(template.render(question=candidate.question),
                               images=[image_bytes])
    verdict = parse_verdict(gateway.call(request).text)
    if verdict is None:
        if stats is not None:
            stats.unparseable_verdicts += 1
        verdict = "irrelevant"
    return replace(candidate, relevance=verdict)


def generate_answer(gateway: Gateway, candidate: CandidateQuestion,
                    style: Style, image_bytes: bytes) -> SynthQA:
    """Answer a relevant candidate in the given style; full trimmed reply."""
    template = load_prompt(_STYLE_PROMPTS[style], require={"question"})
    request = ChatRequest.user(template.render(question=candidate.question),
                               images=[image_bytes])
    answer = gateway.call(request).text.strip()
    if not answer:
        raise SynthesisError(f"empty answer for {candidate.question!r}")
    return SynthQA(
        image=candidate.image,
        instruction_tag=candidate.instruction_tag,
        question=candidate.question,
        answer=answer,
        style=style,
    )


def score_quality(gateway: Gateway, qa: SynthQA, image_bytes: bytes,
                  stats: SynthStats | None = None) -> SynthQA | None:
    """Rate a QA 1..10 via the judge; None when the score is unparseable."""
    template = load_prompt("quality_score", require={"question", "answer"})
    request = ChatRequest.user(
        template.render(question=qa.question, answer=qa.answer),
        images=[image_bytes])
    try:
        quality = parse_score_1_10(gateway.call(request).text)
    except ScoreParseError:
        if stats is not None:
            stats.unparseable_scores += 1
        return None
    return replace(qa, quality=quality)


def prioritized_select(pool: Sequence[SynthQA], budget: int,
                       priority: Sequence[str] = DEFAULT_PRIORITY_CATEGORIES
                       ) -> list[SynthQA]:
    """Fill a budget taking priority categories first, then round-robin.

    Priority categories are drained in the given order (stable within a
    category); the remaining categories contribute one item at a time in
    order of first appearance in the pool. Deterministic.
    """
    if budget < 0:
        raise SynthesisError(f"budget must be >= 0, got {budget}")
    chosen: list[SynthQA] = []
    taken: set[int] = set()
    for category in priority:
        for idx, qa in enumerate(pool):
            if len(chosen) >= budget:
                return chosen
            if idx not in taken and qa.instruction_tag.level1 == category:
                chosen.append(qa)
                taken.add(idx)
    queues: dict[str, list[SynthQA]] = {}
    order: list[str] = []
    for idx, qa in enumerate(pool):
        if idx in taken:
            continue
        category = qa.instruction_tag.level1
        if category not in queues:
            queues[category] = []
            order.append(category)
        queues[category].append(qa)
    while len(chosen) < budget and any(queues[c] for c in order):
        for category in order:
            if len(chosen) >= budget:
                break
            if queues[category]:
                chosen.append(queues[category].pop(0))
    return chosen


def assemble_multiturn(qas: Sequence[SynthQA],
                       max_turns: int = DEFAULT_MAX_TURNS
                       ) -> list[InstructionRecord]:
    """Chunk same-image QAs (generation order) into multi-turn records.

    Each QA lands in exactly one record; a record carries the union of its
    QAs' instruction tags, provenance synthetic.
    """
    if max_turns < 1:
        raise SynthesisError(f"max_turns must be >= 1, got {max_turns}")
    grouped: dict[str, list[SynthQA]] = {}
    image_order: list[str] = []
    refs: dict[str, ImageRef] = {}
    for qa in qas:
        key = qa.image.image_id
        if key not in grouped:
            grouped[key] = []
            image_order.append(key)
            refs[key] = qa.image
        grouped[key].append(qa)
    records: list[InstructionRecord] = []
    for key in image_order:
        group = grouped[key]
        for start in range(0, len(group), max_turns):
            chunk = group[start:start + max_turns]
            tags = sorted({qa.instruction_tag.path for qa in chunk})
            records.append(make_record(
                image=refs[key],
                turns=[(qa.question, qa.answer) for qa in chunk],
                source=SYNTHETIC_SOURCE,
                category=DataCategory.GPT4_AND_SYNTHETIC,
                subtype=SubType.SYNTHETIC,
                instruction_tags=tags,
                provenance=Provenance.SYNTHETIC,
            ))
    return records


# --- artifact serialization (candidates.jsonl / qa_*.jsonl rows) -----------

def _image_to_json(image: ImageRef) -> dict:
    return {"image_id": image.image_id, "uri": image.uri,
            "width": image.width, "height": image.height,
            "format": image.format}


def _image_from_json(obj: dict) -> ImageRef:
    return ImageRef(image_id=obj["image_id"], uri=obj["uri"],
                    width=obj["width"], height=obj["height"],
                    format=obj["format"])


def candidate_to_json(candidate: CandidateQuestion) -> dict:
    return {
        "image": _image_to_json(candidate.image),
        "instruction_tag": candidate.instruction_tag.path,
        "question": candidate.question,
        "exemplar_ids": list(candidate.exemplar_ids),
        "relevance": candidate.relevance,
    }


def candidate_from_json(obj: dict, taxonomy: Taxonomy) -> CandidateQuestion:
    return CandidateQuestion(
        image=_image_from_json(obj["image"]),
        instruction_tag=taxonomy.resolve(obj["instruction_tag"]),
        question=obj["question"],
        exemplar_ids=tuple(obj.get("exemplar_ids", ())),
        relevance=obj.get("relevance"),
    )


def qa_to_json(qa: SynthQA) -> dict:
    return {
        "qa_id": qa.qa_id,
        "image": _image_to_json(qa.image),
        "instruction_tag": qa.instruction_tag.path,
        "question": qa.question,
        "answer": qa.answer,
        "style": qa.style.value,
        "quality": qa.quality,
        "loss": qa.loss,
    }


def qa_from_json(obj: dict, taxonomy: Taxonomy) -> SynthQA:
    return SynthQA(
        image=_image_from_json(obj["image"]),
        instruction_tag=taxonomy.resolve(obj["instruction_tag"]),
        question=obj["question"],
        answer=obj["answer"],
        style=Style(obj["style"]),
        quality=obj.get("quality"),
        loss=obj.get("loss"),
    )


@dataclass
class SynthesisConfig:
    top_k: int = 3
    rng_seed: int = 0
    style_weights: dict[Style, float] = field(
        default_factory=lambda: {s: 1.0 for s in Style})
    quality_threshold: int = QUALITY_THRESHOLD
    max_turns: int = DEFAULT_MAX_TURNS
    workers: int = 4
    aggregation: Aggregation = Aggregation.SUM


def choose_style(config: SynthesisConfig, image_id: str, tag_path: str) -> Style:
    """Weighted random style, deterministic per (seed, image, tag)."""
    rng = random.Random(derive_seed(config.rng_seed, "style", image_id, tag_path))
    styles = list(Style)
    weights = [config.style_weights.get(s, 0.0) for s in styles]
    return rng.choices(styles, weights=weights, k=1)[0]


def fallback_tag(taxonomy: Taxonomy, config: SynthesisConfig,
                 image_id: str) -> InstructionTag:
    """No-overlap fallback: uniform level-1 category, uniform leaf within."""
    rng = random.Random(derive_seed(config.rng_seed, "fallback", image_id))
    category = rng.choice(list(taxonomy.roots))
    return rng.choice(taxonomy.leaves_under(category))


def run_synthesis(
    images: Sequence[tuple[ImageRef, bytes]],
    *,
    tagger: Gateway,
    generator: Gateway,
    judge: Gateway,
    mapping: MappingTable,
    taxonomy: Taxonomy,
    seed_examples: Sequence[SeedExample],
    config: SynthesisConfig | None = None,
    seed_bytes: Callable[[SeedExample], bytes] | None = None,
) -> tuple[list[SynthQA], list[CandidateQuestion], SynthStats]:
    """Synthesize scored QAs for a batch of images.

    Images are independent work items; results are collected in submission
    order so the run is reproducible regardless of completion order.
    Returns (retained QAs, all candidates, stats); retained QAs are
    relevant with quality >= the configured threshold, in deterministic
    order, not yet loss-filtered.
    """
    config = config or SynthesisConfig()
    stats = SynthStats()
    retained: list[SynthQA] = []
    candidates: list[CandidateQuestion] = []

    def process(image: ImageRef, data: bytes):
        local_retained: list[SynthQA] = []
        local_candidates: list[CandidateQuestion] = []
        local = SynthStats()
        tags = {name for name, _ in tagger.tag_image(data)}
        ranked = select_instruction_types(tags, mapping, k=config.top_k,
                                          aggregation=config.aggregation)
        if ranked:
            chosen = [unit for unit, _ in ranked]
        else:
            local.fallback_tag_images += 1
            chosen = [fallback_tag(taxonomy, config, image.image_id)]
        for tag in chosen:
            local.candidates_generated += 1
            exemplars = pick_fewshot(seed_examples, tag, n=2,
                                     rng_seed=config.rng_seed)
            exemplar_imgs = ([seed_bytes(ex) for ex in exemplars]
                             if seed_bytes else [])
            try:
                candidate = generate_question(generator, image, data, tag,
                                              exemplars, exemplar_imgs)
            except SynthesisError:
                local.generation_errors += 1
                continue
            candidate = judge_relevance(judge, candidate, data, local)
            local_candidates.append(candidate)
            if candidate.relevance != "relevant":
                local.irrelevant += 1
                continue
            local.relevant += 1
            style = choose_style(config, image.image_id, tag.path)
            try:
                qa = generate_answer(generator, candidate, style, data)
            except SynthesisError:
                local.answer_errors += 1
                continue
            scored = score_quality(judge, qa, data, local)
            if scored is None:
                continue
            if scored.quality >= config.quality_threshold:
                local.retained += 1
                local_retained.append(scored)
            else:
                local.dropped_low_quality += 1
        return local_retained, local_candidates, local

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(process, ref, data) for ref, data in images]
        for future in futures:
            image_retained, image_candidates, local = future.result()
            retained.extend(image_retained)
            candidates.extend(image_candidates)
            stats.images += 1
            for key, value in local.__dict__.items():
                setattr(stats, key, getattr(stats, key) + value)
    return retained, candidates, stats
