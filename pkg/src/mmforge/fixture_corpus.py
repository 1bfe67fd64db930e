"""Deterministic fixture corpus: 200 raw rows across all four categories.

Generates tiny seeded noise images plus JSONL source shards shaped like
real collected data (captions, QA pairs, conversations, text-only rows),
a matching run config, and two planted duplicates: one byte-identical
repeated row (exact dedup) and one brightness-shifted image pair
(perceptual near-dup at distance 0). Category counts follow the corpus
composition ratio at desk scale: 45 caption / 115 comprehensive /
27 selective / 13 distilled.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

FIXTURE_TAG_POOL = (
    "Coarse Perception/Image Scene/Identify weather condition",
    "Coarse Perception/Image Topic/Identify food",
    "Fine-grained Perception (single-instance)/Object Localization/Count objects",
    "Fine-grained Perception (single-instance)/OCR/Recognize text",
    "Fine-grained Perception (cross-instance)/Spatial Relationship/Determine relative position",
    "Fine-grained Perception (cross-instance)/Attribute Comparison/Compare colors",
    "Relation Reasoning/Social Relation/Other social relations",
    "Relation Reasoning/Physical Relation/Identify cause-effect relationships",
    "Attribute Reasoning/Function Reasoning/Predict function of objects",
    "Attribute Reasoning/Identity Reasoning/Predict occupation/ role/ social status",
    "Logic Reasoning/Structuralized Image-Text Understanding/Parse charts",
    "Logic Reasoning/Future Prediction/Predict action sequence",
)

_NOUNS = ("lighthouse", "bridge", "market", "engine", "garden", "mosaic",
          "antenna", "harbor", "window", "ladder", "banner", "kiosk")
_COLORS = ("red", "blue", "green", "amber", "violet", "teal")
_PLACES = ("plaza", "rooftop", "hallway", "shore", "workshop", "platform")


def _write_image(path: Path, rng: np.random.RandomState,
                 size: tuple[int, int] = (48, 48),
                 base: np.ndarray | None = None,
                 offset: int = 0) -> np.ndarray:
    """Write one seeded noise PNG; returns the pixel array for reuse."""
    if base is None:
        # headroom of 5 keeps a later uniform +5 offset clip-free
        arr = rng.randint(0, 246, size=(size[1], size[0], 3)).astype(np.uint8)
    else:
        arr = np.clip(base.astype(np.int16) + offset, 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")
    return arr


def _jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def build_fixture_corpus(root: str | Path, seed: int = 0,
                         run_id: str = "fixture-run",
                         out_root: str = "runs") -> dict:
    """Build the corpus under ``root``; returns a summary of what exists."""
    root = Path(root)
    images_dir = root / "images"
    sources_dir = root / "sources"
    images_dir.mkdir(parents=True, exist_ok=True)
    sources_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.RandomState(seed)
    image_count = 0

    def next_image(base: np.ndarray | None = None, offset: int = 0):
        nonlocal image_count
        name = f"images/img_{image_count:04d}.png"
        arr = _write_image(root / name, rng, base=base, offset=offset)
        image_count += 1
        return name, arr

    def phrase(kind: str, i: int) -> str:
        noun = _NOUNS[(i * 7 + seed) % len(_NOUNS)]
        color = _COLORS[(i * 5 + seed) % len(_COLORS)]
        place = _PLACES[(i * 3 + seed) % len(_PLACES)]
        if kind == "caption":
            return (f"A {color} {noun} stands near the {place}, photographed "
                    f"in plain daylight with a clear view of its surroundings.")
        if kind == "question":
            return f"What color is the {noun} near the {place}?"
        if kind == "answer":
            return f"The {noun} is {color}."
        if kind == "ocr_answer":
            return noun.upper()
        raise ValueError(kind)

    # captions: 45 rows
    captions = []
    for i in range(45):
        uri, _ = next_image()
        captions.append({"image": uri, "caption": phrase("caption", i)})
    _jsonl(sources_dir / "emu2_captions.jsonl", captions)

    # general QA: 70 rows; row 1 repeats row 0 (exact dup),
    # row 3 reuses row 2's pixels +5 (near dup); rows 10..39 carry seed tags
    general = []
    dup_base = None
    for i in range(70):
        if i == 1:
            general.append(dict(general[0]))
            continue
        if i == 3:
            uri, _ = next_image(base=dup_base, offset=5)
            row = {"image": uri,
                   "question": "Which object appears closest to the camera?",
                   "answer": f"The {_NOUNS[(i + seed) % len(_NOUNS)]}."}
            general.append(row)
            continue
        uri, arr = next_image()
        if i == 2:
            dup_base = arr
        row = {"image": uri, "question": phrase("question", i),
               "answer": phrase("answer", i)}
        if 10 <= i < 40:
            row["instruction_tags"] = [FIXTURE_TAG_POOL[i % len(FIXTURE_TAG_POOL)]]
        general.append(row)
    _jsonl(sources_dir / "general_qa.jsonl", general)

    # OCR QA: 15 rows
    ocr = []
    for i in range(15):
        uri, _ = next_image()
        ocr.append({"image": uri, "question": "What does the sign in the image say?",
                    "answer": phrase("ocr_answer", i)})
    _jsonl(sources_dir / "ocr_qa.jsonl", ocr)

    # doc/chart QA: 15 rows
    doc = []
    for i in range(15):
        uri, _ = next_image()
        doc.append({"image": uri,
                    "question": "Which bar in the chart has the highest value?",
                    "answer": f"The bar labeled {_NOUNS[(i * 2 + seed) % len(_NOUNS)]}."})
    _jsonl(sources_dir / "doc_chart_qa.jsonl", doc)

    # text-only instructions: 15 rows; the word-count knob keeps every row
    # distinct (noun pool repeats with period 12 and these rows carry no
    # image to differentiate the record id)
    text_rows = []
    for i in range(15):
        noun = _NOUNS[(i + seed) % len(_NOUNS)]
        text_rows.append({
            "instruction": (f"Compose one sentence about a {noun} "
                            f"using exactly {4 + i % 9} words."),
            "response": f"The old {noun} was repaired last spring.",
        })
    _jsonl(sources_dir / "text_instructions.jsonl", text_rows)

    # selective QA: 27 rows, cycling sub-type overrides
    subtypes = ("GeneralInstruction", "OCR", "DocChartScreen",
                "MathReasoning", "TextInstruction")
    selective = []
    for i in range(27):
        subtype = subtypes[i % len(subtypes)]
        row = {"question": phrase("question", i + 100),
               "answer": phrase("answer", i + 100),
               "subtype": subtype}
        if subtype != "TextInstruction":
            uri, _ = next_image()
            row["image"] = uri
        selective.append(row)
    _jsonl(sources_dir / "selective_mixed.jsonl", selective)

    # distilled conversations: 13 rows, 1-3 turns, all tagged
    distilled = []
    for i in range(13):
        uri, _ = next_image()
        n_turns = 1 + (i % 3)
        convo = []
        for t in range(n_turns):
            convo.append({"from": "human", "value": phrase("question", i * 3 + t)})
            convo.append({"from": "gpt", "value": phrase("answer", i * 3 + t)})
        distilled.append({
            "image": uri,
            "conversations": convo,
            "instruction_tags": [FIXTURE_TAG_POOL[(i * 5) % len(FIXTURE_TAG_POOL)]],
        })
    _jsonl(sources_dir / "gpt4_conversations.jsonl", distilled)

    config = {
        "run_id": run_id,
        "out_root": out_root,
        "seed": seed,
        "offline": True,
        "image_root": ".",
        "sources": [
            {"name": "emu2-captions", "adapter": "caption",
             "path": "sources/emu2_captions.jsonl",
             "category": "ImageCaption", "subtype": "Caption"},
            {"name": "general-qa", "adapter": "qa",
             "path": "sources/general_qa.jsonl",
             "category": "Comprehensive", "subtype": "GeneralInstruction"},
            {"name": "ocr-qa", "adapter": "qa",
             "path": "sources/ocr_qa.jsonl",
             "category": "Comprehensive", "subtype": "OCR"},
            {"name": "doc-chart-qa", "adapter": "qa",
             "path": "sources/doc_chart_qa.jsonl",
             "category": "Comprehensive", "subtype": "DocChartScreen"},
            {"name": "text-instructions", "adapter": "text_instruction",
             "path": "sources/text_instructions.jsonl",
             "category": "Comprehensive", "subtype": "TextInstruction"},
            {"name": "selective-mixed", "adapter": "qa",
             "path": "sources/selective_mixed.jsonl",
             "category": "Selective", "subtype": "GeneralInstruction"},
            {"name": "gpt4-conversations", "adapter": "conversations",
             "path": "sources/gpt4_conversations.jsonl",
             "category": "Gpt4AndSynthetic", "subtype": "GeneralInstruction",
             "provenance": "gpt4-distilled"},
        ],
        "endpoints": {},
        "synthesis": {"top_k": 3, "max_turns": 5, "workers": 4},
        "dedup": {"near_dup_threshold": 4, "loss_drop_fraction": 0.05},
        "manifests": {"budgets": {}},
    }
    config_path = root / "config.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=False),
                           encoding="utf-8")
    rows = (len(captions) + len(general) + len(ocr) + len(doc)
            + len(text_rows) + len(selective) + len(distilled))
    return {"rows": rows, "images": image_count, "config": str(config_path)}
