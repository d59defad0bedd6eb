"""Wire client for a vision-language endpoint, plus a mock oracle server.

The wire protocol is a single POST to ``/v1/generate`` with the JSON body
``{"prompt", "image_b64", "max_tokens", "temperature"}`` answered by
``{"text": ...}``. Model output text is free-form; :func:`parse_detections`
extracts the first JSON array of ``{"bbox", "label"}`` objects from it,
tolerating surrounding prose.

The mock oracle answers from ground truth corrupted by configurable noise,
deterministically per (seed, sample id), so whole-pipeline runs can be
scored against known answers without a trained model. Prompts carry a
machine-readable trailer (``[ctx sample_id=... | crop=...]``) that the
oracle strips to associate requests with manifest samples.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import math
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np
import requests
from PIL import Image

from .core import AnomalyVocabulary, BBox, LabeledBox, RasterImage, SampleRecord, iou
from .errors import ExhaustedRetries, ProtocolError, RequestTimeout, UnknownSample
from .seeding import stable_seed

GENERATE_PATH = "/v1/generate"

_TRAILER_RE = re.compile(
    r"\n\[ctx sample_id=(?P<sid>[^\s\]]+)(?: crop=(?P<crop>[-0-9.,]+))?\]\s*$")


@dataclass(frozen=True)
class ModelRequest:
    prompt: str
    image_b64: str
    max_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        try:
            base64.b64decode(self.image_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise ValueError("image_b64 is not valid base64") from exc


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: float


@dataclass(frozen=True)
class OracleNoise:
    """Corruption applied to ground truth before the mock answers."""

    p_drop: float = 0.0
    jitter_sigma: float = 0.0
    p_label_flip: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_drop", "p_label_flip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_sigma < 0:
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")


def encode_image(img: RasterImage) -> str:
    """Base64 of the PNG encoding of ``img``; deterministic for fixed pixels."""
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def prompt_trailer(sample_id: str, crop: BBox | None = None) -> str:
    """Trailer appended to inference prompts so the mock can find the sample."""
    if re.search(r"[\s\]]", sample_id):
        raise ValueError(f"sample_id not trailer-safe: {sample_id!r}")
    if crop is None:
        return f"\n[ctx sample_id={sample_id}]"
    return (f"\n[ctx sample_id={sample_id} "
            f"crop={crop.x1:.2f},{crop.y1:.2f},{crop.x2:.2f},{crop.y2:.2f}]")


def strip_trailer(prompt: str) -> tuple[str, str | None, BBox | None]:
    """(prompt without trailer, sample_id, crop box) — ids None when absent."""
    m = _TRAILER_RE.search(prompt)
    if m is None:
        return prompt, None, None
    crop = None
    if m.group("crop"):
        x1, y1, x2, y2 = (float(v) for v in m.group("crop").split(","))
        crop = BBox(x1, y1, x2, y2)
    return prompt[: m.start()], m.group("sid"), crop


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class ModelClient:
    """Thread-safe endpoint client with retries and bounded concurrency.

    Connection errors and 5xx responses are treated as transient and retried
    up to ``max_retries`` times with exponential backoff; timeouts and
    malformed replies fail immediately.
    """

    def __init__(
        self,
        endpoint: str,
        auth_token: str | None = None,
        timeout_s: float = 120.0,
        max_retries: int = 3,
        backoff_base_s: float = 0.5,
        max_concurrency: int = 4,
    ) -> None:
        base = endpoint.rstrip("/")
        self.url = base if base.endswith(GENERATE_PATH) else base + GENERATE_PATH
        self.auth_token = auth_token
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def send(self, request: ModelRequest) -> ModelResponse:
        body = {
            "prompt": request.prompt,
            "image_b64": request.image_b64,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"

        with self._slots:
            start = time.perf_counter()
            last_fault = "no attempt made"
            for attempt in range(self.max_retries + 1):
                if attempt:
                    time.sleep(self.backoff_base_s * 2 ** (attempt - 1))
                try:
                    resp = requests.post(self.url, json=body, headers=headers,
                                         timeout=self.timeout_s)
                except requests.Timeout as exc:
                    raise RequestTimeout(
                        f"{self.url} did not answer within {self.timeout_s}s") from exc
                except requests.ConnectionError as exc:
                    last_fault = f"connection error: {exc}"
                    continue
                if resp.status_code >= 500:
                    last_fault = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code != 200:
                    raise ProtocolError(f"HTTP {resp.status_code} from {self.url}")
                try:
                    payload = resp.json()
                except ValueError as exc:
                    raise ProtocolError("response body is not JSON") from exc
                if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
                    raise ProtocolError('response JSON lacks a string "text" field')
                latency = (time.perf_counter() - start) * 1000.0
                return ModelResponse(text=payload["text"], latency_ms=latency)
        raise ExhaustedRetries(
            f"{self.url} still failing after {self.max_retries} retries ({last_fault})")


def send(request: ModelRequest, endpoint: str, **kwargs) -> ModelResponse:
    """One-shot convenience wrapper around :class:`ModelClient`."""
    return ModelClient(endpoint, **kwargs).send(request)


# ---------------------------------------------------------------------------
# Detection parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParseResult:
    boxes: tuple[LabeledBox, ...]
    dropped: int


def _first_object_array(text: str) -> list | None:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\[", text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except ValueError:
            continue
        if isinstance(value, list) and all(isinstance(v, dict) for v in value):
            return value
    return None


def parse_detections(text: str, image_bounds: tuple[int, int]) -> ParseResult:
    """Extract labelled boxes from model text; never raises.

    Takes the first well-formed JSON array of objects in the text (prose
    around it is fine). Coordinates are clamped to the image; entries with
    non-numeric coordinates, corners inverted after clamping, or empty
    labels are dropped and counted.
    """
    w, h = image_bounds
    arr = _first_object_array(text)
    if arr is None:
        return ParseResult((), 0)
    boxes: list[LabeledBox] = []
    dropped = 0
    for entry in arr:
        bbox = entry.get("bbox")
        label = entry.get("label")
        if (not isinstance(bbox, (list, tuple)) or len(bbox) != 4
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       or not math.isfinite(v) for v in bbox)
                or not isinstance(label, str) or not label.strip()):
            dropped += 1
            continue
        x1 = min(max(float(bbox[0]), 0.0), float(w))
        y1 = min(max(float(bbox[1]), 0.0), float(h))
        x2 = min(max(float(bbox[2]), 0.0), float(w))
        y2 = min(max(float(bbox[3]), 0.0), float(h))
        if x2 <= x1 or y2 <= y1:
            dropped += 1
            continue
        boxes.append(LabeledBox(BBox(x1, y1, x2, y2), label))
    return ParseResult(tuple(boxes), dropped)


# ---------------------------------------------------------------------------
# Mock oracle
# ---------------------------------------------------------------------------

class MockOracle:
    """Pure response logic: ground truth + seeded noise, no HTTP involved."""

    def __init__(
        self,
        manifest: Sequence[SampleRecord],
        noise: OracleNoise,
        vocab: AnomalyVocabulary | None = None,
    ) -> None:
        self.samples = {rec.sample_id: rec for rec in manifest}
        if len(self.samples) != len(manifest):
            raise ValueError("manifest sample ids must be unique")
        self.noise = noise
        self.vocab = vocab or AnomalyVocabulary.default()

    def respond(self, prompt: str) -> str:
        _, sample_id, crop = strip_trailer(prompt)
        if sample_id is None or sample_id not in self.samples:
            raise UnknownSample(f"prompt names no known sample (id={sample_id!r})")
        rec = self.samples[sample_id]
        if crop is not None:
            return self._classify(rec, crop)
        return self._detect(rec)

    def _detect(self, rec: SampleRecord) -> str:
        rng = np.random.default_rng(stable_seed(self.noise.seed, "pass1", rec.sample_id))
        out = []
        for lb in rec.ground_truth:
            u_drop = rng.uniform()
            jitter = rng.normal(0.0, 1.0, size=4)
            u_flip = rng.uniform()
            pick = int(rng.integers(0, max(1, len(self.vocab.labels) - 1)))
            if u_drop < self.noise.p_drop:
                continue
            b = lb.bbox
            coords = [b.x1, b.y1, b.x2, b.y2]
            if self.noise.jitter_sigma > 0:
                coords = [c + self.noise.jitter_sigma * j
                          for c, j in zip(coords, jitter)]
            label = lb.label
            if u_flip < self.noise.p_label_flip:
                others = [l for l in self.vocab.labels if l != label] \
                    or list(self.vocab.labels)
                label = others[pick % len(others)]
            out.append({"bbox": coords, "label": label})
        return json.dumps(out)

    def _classify(self, rec: SampleRecord, crop: BBox) -> str:
        if not rec.ground_truth:
            return ""
        best = max(range(len(rec.ground_truth)),
                   key=lambda g: (iou(crop, rec.ground_truth[g].bbox), -g))
        label = rec.ground_truth[best].label
        crop_key = f"{crop.x1:.2f},{crop.y1:.2f},{crop.x2:.2f},{crop.y2:.2f}"
        rng = np.random.default_rng(
            stable_seed(self.noise.seed, "pass2", rec.sample_id, crop_key))
        u_flip = rng.uniform()
        pick = int(rng.integers(0, max(1, len(self.vocab.labels) - 1)))
        if u_flip < self.noise.p_label_flip:
            others = [l for l in self.vocab.labels if l != label] \
                or list(self.vocab.labels)
            label = others[pick % len(others)]
        return label


class MockOracleServer:
    """Threaded HTTP wrapper around :class:`MockOracle`.

    ``fail_first`` makes the first N requests answer 503 (for retry tests);
    ``response_delay_s`` holds each request open so concurrency is
    observable. ``GET /stats`` reports request totals and the in-flight
    high-water mark.
    """

    def __init__(
        self,
        manifest: Sequence[SampleRecord],
        noise: OracleNoise,
        vocab: AnomalyVocabulary | None = None,
        port: int = 0,
        fail_first: int = 0,
        response_delay_s: float = 0.0,
    ) -> None:
        self.oracle = MockOracle(manifest, noise, vocab)
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0
        self.requests_served = 0
        self._fail_remaining = fail_first
        self._delay = response_delay_s

        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # noqa: N802 - stdlib name
                pass

            def _reply(self, status: int, obj: dict) -> None:
                body = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):  # noqa: N802
                if self.path != "/stats":
                    self._reply(404, {"error": "not found"})
                    return
                with server._lock:
                    self._reply(200, {
                        "requests": server.requests_served,
                        "max_in_flight": server.max_in_flight,
                    })

            def do_POST(self):  # noqa: N802
                if self.path != GENERATE_PATH:
                    self._reply(404, {"error": "not found"})
                    return
                with server._lock:
                    server._in_flight += 1
                    server.max_in_flight = max(server.max_in_flight,
                                               server._in_flight)
                    server.requests_served += 1
                    must_fail = server._fail_remaining > 0
                    if must_fail:
                        server._fail_remaining -= 1
                try:
                    if server._delay > 0:
                        time.sleep(server._delay)
                    if must_fail:
                        self._reply(503, {"error": "synthetic failure"})
                        return
                    length = int(self.headers.get("Content-Length", "0"))
                    try:
                        payload = json.loads(self.rfile.read(length))
                        prompt = payload["prompt"]
                    except (ValueError, KeyError, TypeError):
                        self._reply(400, {"error": "malformed request"})
                        return
                    try:
                        text = server.oracle.respond(prompt)
                    except UnknownSample as exc:
                        self._reply(404, {"error": str(exc)})
                        return
                    self._reply(200, {"text": text})
                finally:
                    with server._lock:
                        server._in_flight -= 1

        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "MockOracleServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockOracleServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def mock_oracle_serve(
    manifest: Sequence[SampleRecord],
    noise: OracleNoise,
    port: int = 0,
    vocab: AnomalyVocabulary | None = None,
) -> MockOracleServer:
    """Start a mock oracle server on ``port`` (0 picks a free one)."""
    return MockOracleServer(manifest, noise, vocab=vocab, port=port).start()
