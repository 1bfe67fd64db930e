"""Talking to model endpoints through the gateway.

Every model the pipeline consumes (tagger, generator, judge, loss scorer)
sits behind one OpenAI-compatible protocol. The bundled fixture server
speaks that protocol deterministically, so this demo runs with no model
and no network beyond localhost.
"""

import io

import numpy as np
from PIL import Image

from mmforge import ChatRequest, EndpointConfig, Gateway, RetryPolicy
from mmforge.corpus import DataCategory, ImageRef, SubType, make_record
from mmforge.fixture_server import FixtureServer
from mmforge.gateway import parse_score_1_10


def tiny_png(seed):
    arr = np.random.RandomState(seed).randint(0, 246, (48, 48, 3)).astype("uint8")
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


with FixtureServer(seed=11) as server:
    print(f"fixture server at {server.url}")
    config = EndpointConfig(
        base_url=server.url,
        model_name="demo-model",
        max_concurrent=4,
        timeout=10.0,
        retry=RetryPolicy(max_attempts=3, base_backoff=0.2, jitter=0.1),
    )
    gateway = Gateway(config)

    # plain chat round trip
    response = gateway.call(ChatRequest.user("Describe your day."))
    print(f"chat reply: {response.text!r} (attempts={response.attempts})")

    # image tagging returns an open-vocabulary tag set with confidences
    tags = gateway.tag_image(tiny_png(1))
    print(f"image tags: {sorted(name for name, _ in tags)}")

    # quality scores are parsed as the first in-range integer
    print(f"parse 'Quality: 9/10, crisp and correct.' -> "
          f"{parse_score_1_10('Quality: 9/10, crisp and correct.')}")

    # the loss route returns a finite mean per-token NLL for a record
    record = make_record(
        image=ImageRef(image_id="e" * 32, uri="images/e.png",
                       width=48, height=48, format="PNG"),
        turns=[("What stands out?", "The lighthouse.")],
        source="demo", category=DataCategory.COMPREHENSIVE,
        subtype=SubType.GENERAL_INSTRUCTION)
    print(f"loss: {gateway.score_loss(record).loss:.3f}")

    # transient failures are retried with exponential backoff + jitter
    server.inject_faults("/chat/completions", ["429"])
    response = gateway.call(ChatRequest.user("Once more, with a hiccup."))
    print(f"after injected 429: attempts={response.attempts}")
