"""Deterministic mock model server for offline runs and tests.

Implements the chat-completions route for tagging, question generation,
relevance judging, answer generation, and quality rating, plus the
fixture-only ``/score`` loss route. Every reply is a pure function of the
server seed and the request content, so whole pipeline runs reproduce
byte-for-byte. Fault injection (429 / 5xx / 400 / timeout / NaN) and
in-flight tracking support the gateway robustness tests.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

FIXTURE_VOCABULARY = (
    "cat", "dog", "tree", "car", "building", "person", "chart", "table",
    "text", "sky", "water", "food", "flower", "street", "mountain", "book",
    "diagram", "graph", "animal", "toy", "sign", "screen", "document", "hand",
)

# Phrases that identify which prompt template produced a request. They
# mirror the bundled prompt assets; changing a template means updating
# the matching phrase here and in the tests that pin it.
_ROUTE_PHRASES = (
    ("tagging", "image tagging service"),
    ("question", "visual instruction writer"),
    ("relevance", "relevance judge"),
    ("quality", "data quality rater"),
    ("answer_short", "single word or short phrase"),
    ("answer_brief", "brief one-sentence explanation"),
    ("answer_detailed", "detailed explanation"),
)


def _digest(seed: int, route: str, content: str) -> int:
    raw = hashlib.sha256(f"{seed}|{route}|{content}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big")


def _pick(vocabulary, d: int, n: int) -> list[str]:
    out = []
    for i in range(n):
        out.append(vocabulary[(d >> (i * 5)) % len(vocabulary)])
    return out


class _FixtureState:
    def __init__(self, seed: int, latency: float):
        self.seed = seed
        self.latency = latency
        self.lock = threading.Lock()
        self.faults: dict[str, list[str]] = {}
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests_served = 0
        self.timeout_sleep = 1.5

    def next_fault(self, path: str) -> str:
        with self.lock:
            plan = self.faults.get(path)
            if plan:
                return plan.pop(0)
        return "ok"

    def enter(self):
        with self.lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.requests_served += 1

    def leave(self):
        with self.lock:
            self.in_flight -= 1


class _FixtureHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: _FixtureState  # set on the handler class per server

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    def _send_json(self, status: int, body: dict):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/stats":
            with self.state.lock:
                body = {"max_in_flight": self.state.max_in_flight,
                        "requests_served": self.state.requests_served}
            self._send_json(200, body)
        else:
            self._send_json(404, {"error": "not found"})

    def do_POST(self):
        state = self.state
        state.enter()
        try:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            fault = state.next_fault(self.path)
            if fault == "timeout":
                time.sleep(state.timeout_sleep)
            elif fault in ("429", "500", "502", "503"):
                self._send_json(int(fault), {"error": {"message": "injected fault",
                                                       "code": fault}})
                return
            elif fault == "400":
                self._send_json(400, {"error": {"message": "bad request (injected)",
                                                "code": "400"}})
                return
            if state.latency:
                time.sleep(state.latency)
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError:
                self._send_json(400, {"error": {"message": "invalid JSON"}})
                return
            if self.path == "/chat/completions":
                self._send_json(200, self._complete(payload))
            elif self.path == "/score":
                self._send_json(200, self._score(payload, fault))
            else:
                self._send_json(404, {"error": "not found"})
        finally:
            state.leave()

    # -- deterministic content ----------------------------------------

    def _request_text_and_image(self, payload: dict) -> tuple[str, str]:
        texts, image_sig = [], ""
        for msg in payload.get("messages", []):
            content = msg.get("content", [])
            if isinstance(content, str):
                texts.append(content)
                continue
            for part in content:
                if part.get("type") == "text":
                    texts.append(part.get("text", ""))
                elif part.get("type") == "image_url":
                    url = part.get("image_url", {}).get("url", "")
                    image_sig = hashlib.sha256(url.encode("ascii")).hexdigest()[:16]
        return "\n".join(texts), image_sig

    def _complete(self, payload: dict) -> dict:
        text, image_sig = self._request_text_and_image(payload)
        lowered = text.lower()
        route = "generic"
        for name, phrase in _ROUTE_PHRASES:
            if phrase in lowered:
                route = name
                break
        d = _digest(self.state.seed, route, text + "#" + image_sig)
        vocab = FIXTURE_VOCABULARY
        if route == "tagging":
            reply = " | ".join(_pick(vocab, d, 3 + d % 4))
        elif route == "question":
            noun, aspect = _pick(vocab, d, 2)
            reply = f"What does the {noun} near the {aspect} look like?"
        elif route == "relevance":
            reply = "no" if d % 10 == 0 else "yes"
        elif route == "quality":
            reply = str(7 + d % 4)
        elif route == "answer_short":
            reply = _pick(vocab, d, 1)[0].capitalize() + "."
        elif route == "answer_brief":
            noun = _pick(vocab, d, 1)[0]
            reply = (f"The {noun} stands out against the rest of the scene. "
                     f"The answer is {noun}.")
        elif route == "answer_detailed":
            noun, other = _pick(vocab, d, 2)
            reply = (f"Looking closely, the {noun} occupies the center of the "
                     f"frame while the {other} sits behind it. Its shape and "
                     f"placement make it the most prominent element. "
                     f"The answer is {noun}.")
        else:
            reply = f"fixture reply {d % 100000}"
        return {
            "id": f"fixture-{d % 10**12}",
            "object": "chat.completion",
            "model": payload.get("model", "fixture"),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": reply},
                "finish_reason": "stop",
            }],
            "usage": {"prompt_tokens": len(text) // 4,
                      "completion_tokens": len(reply) // 4,
                      "total_tokens": (len(text) + len(reply)) // 4},
        }

    def _score(self, payload: dict, fault: str) -> dict:
        if fault == "nan":
            return {"loss": float("nan")}
        content = json.dumps(payload, sort_keys=True)
        d = _digest(self.state.seed, "loss", content)
        return {"loss": 0.5 + (d % 4000) / 1000.0}


class FixtureServer:
    """Threaded fixture server bound to an ephemeral localhost port.

    Usable as a context manager; ``inject_faults`` schedules per-path
    fault tokens ("429", "500", "400", "timeout", "nan") consumed one per
    request before normal handling resumes.
    """

    def __init__(self, seed: int = 0, latency: float = 0.0):
        self.state = _FixtureState(seed, latency)
        handler = type("BoundFixtureHandler", (_FixtureHandler,),
                       {"state": self.state})
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def max_in_flight(self) -> int:
        with self.state.lock:
            return self.state.max_in_flight

    def inject_faults(self, path: str, tokens: list[str]) -> None:
        with self.state.lock:
            self.state.faults.setdefault(path, []).extend(tokens)

    def reset_stats(self) -> None:
        with self.state.lock:
            self.state.max_in_flight = 0
            self.state.in_flight = 0
            self.state.requests_served = 0

    def start(self) -> "FixtureServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "FixtureServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
