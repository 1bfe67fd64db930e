"""Shared fixtures: taxonomy, fixture server, tiny images, and one
session-scoped offline pipeline run that several test modules inspect."""

from __future__ import annotations

import io

import numpy as np
import pytest
from PIL import Image

from mmforge.corpus import (DataCategory, ImageRef, Provenance, SubType,
                            make_record)
from mmforge.fixture_corpus import build_fixture_corpus
from mmforge.fixture_server import FixtureServer
from mmforge.taxonomy import load_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture()
def fixture_server():
    with FixtureServer(seed=7) as server:
        yield server


def png_bytes(seed: int = 0, size: tuple[int, int] = (48, 48),
              offset: int = 0) -> bytes:
    """Seeded noise PNG; pixel values stay in [0, 245] so +offset <= 10
    never clips."""
    rng = np.random.RandomState(seed)
    arr = rng.randint(0, 246, size=(size[1], size[0], 3)).astype(np.uint8)
    arr = np.clip(arr.astype(np.int16) + offset, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_ref(image_id: str = "deadbeef" * 4, uri: str = "images/x.png",
              size: tuple[int, int] = (48, 48)) -> ImageRef:
    return ImageRef(image_id=image_id[:32], uri=uri,
                    width=size[0], height=size[1], format="PNG")


def simple_record(n: int = 0, category: DataCategory = DataCategory.COMPREHENSIVE,
                  subtype: SubType = SubType.GENERAL_INSTRUCTION,
                  image: ImageRef | None = None, tags=()):
    return make_record(
        image=image,
        turns=[(f"question {n}?", f"answer {n}.")],
        source="test-source",
        category=category,
        subtype=subtype,
        instruction_tags=tags,
        provenance=Provenance.COLLECTED,
    )


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    """One full offline pipeline run over the bundled fixture corpus."""
    from mmforge import pipeline as pipe

    root = tmp_path_factory.mktemp("e2e-corpus")
    build_fixture_corpus(root, seed=0, run_id="e2e", out_root="runs")
    config = pipe.load_config(root / "config.yaml")
    summary = pipe.run(config)
    return {"root": root, "config": config, "summary": summary}
