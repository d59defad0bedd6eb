import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from patroldiff.client import (
    MockOracle,
    MockOracleServer,
    ModelClient,
    ModelRequest,
    OracleNoise,
    encode_image,
    parse_detections,
    prompt_trailer,
    strip_trailer,
)
from patroldiff.core import (
    AnomalyVocabulary,
    BBox,
    LabeledBox,
    RasterImage,
    SampleRecord,
)
from patroldiff.errors import ExhaustedRetries, ProtocolError, UnknownSample

TINY_B64 = encode_image(RasterImage(np.zeros((8, 8, 3), np.uint8)))


def gt_sample(sample_id: str, boxes) -> SampleRecord:
    return SampleRecord(
        sample_id=sample_id,
        target_image="unused.png",
        ground_truth=tuple(LabeledBox(BBox(*b), lbl) for b, lbl in boxes),
    )


class TestParseDetections:
    def test_plain_array(self):
        result = parse_detections('[{"bbox":[1,2,3,4],"label":"tool"}]', (100, 100))
        assert result.dropped == 0
        [det] = result.boxes
        assert det.bbox.as_list() == [1.0, 2.0, 3.0, 4.0]
        assert det.label == "tool"

    def test_prose_around_array(self):
        text = 'Here are results: [{"bbox":[5,5,9,9],"label":"glove"}] hope this helps'
        result = parse_detections(text, (50, 50))
        assert len(result.boxes) == 1

    def test_no_array_is_empty_without_warnings(self):
        result = parse_detections("no anomalies found", (50, 50))
        assert result.boxes == () and result.dropped == 0

    def test_empty_array(self):
        result = parse_detections("[]", (50, 50))
        assert result.boxes == () and result.dropped == 0

    def test_skips_non_object_arrays(self):
        text = 'coords [1,2,3,4] then [{"bbox":[0,0,2,2],"label":"can"}]'
        result = parse_detections(text, (10, 10))
        assert len(result.boxes) == 1
        assert result.boxes[0].label == "can"

    def test_drops_malformed_entries_with_counts(self):
        text = json.dumps([
            {"bbox": [1, 2, 3, 4], "label": "tool"},
            {"bbox": [1, 2, 3], "label": "short"},
            {"bbox": [1, 2, 3, "x"], "label": "nonnumeric"},
            {"bbox": [5, 5, 1, 9], "label": "inverted"},
            {"bbox": [1, 1, 4, 4], "label": "   "},
            {"label": "boxless"},
        ])
        result = parse_detections(text, (100, 100))
        assert len(result.boxes) == 1
        assert result.dropped == 5

    def test_clamps_to_bounds(self):
        result = parse_detections('[{"bbox":[-5,-5,200,40],"label":"big"}]', (100, 50))
        [det] = result.boxes
        assert det.bbox.as_list() == [0.0, 0.0, 100.0, 40.0]

    def test_drops_fully_outside_after_clamp(self):
        result = parse_detections('[{"bbox":[200,200,300,300],"label":"out"}]',
                                  (100, 100))
        assert result.boxes == () and result.dropped == 1

    def test_never_emits_invalid_boxes(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            entries = [{"bbox": list(np.round(rng.uniform(-50, 150, 4), 2)),
                        "label": "x"} for _ in range(5)]
            result = parse_detections(json.dumps(entries), (100, 100))
            for det in result.boxes:
                assert 0 <= det.bbox.x1 < det.bbox.x2 <= 100
                assert 0 <= det.bbox.y1 < det.bbox.y2 <= 100


class TestModelRequest:
    def test_rejects_empty_prompt(self):
        with pytest.raises(ValueError):
            ModelRequest(prompt="", image_b64=TINY_B64)

    def test_rejects_bad_base64(self):
        with pytest.raises(ValueError):
            ModelRequest(prompt="hi", image_b64="@@not-base64@@")


class TestTrailer:
    def test_round_trip_without_crop(self):
        prompt = "find stuff" + prompt_trailer("s-1")
        body, sid, crop = strip_trailer(prompt)
        assert (body, sid, crop) == ("find stuff", "s-1", None)

    def test_round_trip_with_crop(self):
        crop = BBox(1.25, 2.5, 10.75, 20.0)
        _, sid, parsed = strip_trailer("classify" + prompt_trailer("s-2", crop))
        assert sid == "s-2"
        assert parsed.as_list() == [1.25, 2.5, 10.75, 20.0]

    def test_unsafe_sample_id_rejected(self):
        with pytest.raises(ValueError):
            prompt_trailer("bad id")


class TestSendAgainstMock:
    def manifest(self):
        return [gt_sample("s-0", [((10, 10, 30, 30), "tool")])]

    def test_loopback(self):
        with MockOracleServer(self.manifest(), OracleNoise(seed=1)) as server:
            client = ModelClient(server.endpoint)
            req = ModelRequest(prompt="find" + prompt_trailer("s-0"),
                               image_b64=TINY_B64)
            resp = client.send(req)
            parsed = json.loads(resp.text)
            assert parsed == [{"bbox": [10.0, 10.0, 30.0, 30.0], "label": "tool"}]
            assert resp.latency_ms >= 0

    def test_retries_transient_503(self):
        with MockOracleServer(self.manifest(), OracleNoise(seed=1),
                              fail_first=2) as server:
            client = ModelClient(server.endpoint, backoff_base_s=0.01)
            req = ModelRequest(prompt="find" + prompt_trailer("s-0"),
                               image_b64=TINY_B64)
            assert json.loads(client.send(req).text)

    def test_exhausted_retries(self):
        with MockOracleServer(self.manifest(), OracleNoise(seed=1),
                              fail_first=99) as server:
            client = ModelClient(server.endpoint, max_retries=2,
                                 backoff_base_s=0.01)
            with pytest.raises(ExhaustedRetries):
                client.send(ModelRequest(prompt="x" + prompt_trailer("s-0"),
                                         image_b64=TINY_B64))

    def test_unknown_sample_is_protocol_error_over_http(self):
        with MockOracleServer(self.manifest(), OracleNoise(seed=1)) as server:
            client = ModelClient(server.endpoint)
            with pytest.raises(ProtocolError):
                client.send(ModelRequest(prompt="x" + prompt_trailer("nope"),
                                         image_b64=TINY_B64))

    def test_bearer_token_header_sent(self):
        seen = {}

        class CaptureHandler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                seen["auth"] = self.headers.get("Authorization")
                body = json.dumps({"text": "ok"}).encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), CaptureHandler)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        try:
            client = ModelClient(f"http://127.0.0.1:{httpd.server_address[1]}",
                                 auth_token="sekrit")
            client.send(ModelRequest(prompt="x", image_b64=TINY_B64))
            assert seen["auth"] == "Bearer sekrit"
        finally:
            httpd.shutdown()
            httpd.server_close()

    def test_malformed_server_json_raises_protocol_error(self):
        class GarbageHandler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                body = b"this is not json"
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), GarbageHandler)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        try:
            client = ModelClient(f"http://127.0.0.1:{httpd.server_address[1]}")
            with pytest.raises(ProtocolError):
                client.send(ModelRequest(prompt="x", image_b64=TINY_B64))
        finally:
            httpd.shutdown()
            httpd.server_close()

    def test_concurrency_bound_observed_by_server(self):
        manifest = [gt_sample(f"s-{i}", [((1, 1, 5, 5), "tool")])
                    for i in range(12)]
        with MockOracleServer(manifest, OracleNoise(seed=1),
                              response_delay_s=0.05) as server:
            client = ModelClient(server.endpoint, max_concurrency=4)

            def hit(i):
                return client.send(ModelRequest(
                    prompt="x" + prompt_trailer(f"s-{i}"), image_b64=TINY_B64))

            with ThreadPoolExecutor(max_workers=12) as pool:
                list(pool.map(hit, range(12)))
            assert server.requests_served == 12
            assert server.max_in_flight <= 4


class TestMockOracle:
    vocab = AnomalyVocabulary.default()

    def test_zero_noise_returns_ground_truth_exactly(self):
        rec = gt_sample("a", [((10, 20, 30, 40), "tool"),
                              ((50, 50, 80, 90), "helmet")])
        oracle = MockOracle([rec], OracleNoise(seed=5), self.vocab)
        text = oracle.respond("find" + prompt_trailer("a"))
        parsed = parse_detections(text, (1000, 1000))
        assert [d.bbox.as_list() for d in parsed.boxes] == \
            [[10.0, 20.0, 30.0, 40.0], [50.0, 50.0, 80.0, 90.0]]
        assert [d.label for d in parsed.boxes] == ["tool", "helmet"]

    def test_p_drop_one_empties_every_sample(self):
        recs = [gt_sample(f"s{i}", [((1, 1, 9, 9), "tool")]) for i in range(20)]
        oracle = MockOracle(recs, OracleNoise(p_drop=1.0, seed=3), self.vocab)
        for rec in recs:
            assert json.loads(oracle.respond("x" + prompt_trailer(rec.sample_id))) == []

    def test_drop_rate_within_binomial_bounds(self):
        # Binomial oracle: n=1000, p=0.3 -> 3 sigma ~ 43.5 around 300.
        recs = [gt_sample(f"s{i}", [((1, 1, 9, 9), "tool")]) for i in range(1000)]
        oracle = MockOracle(recs, OracleNoise(p_drop=0.3, seed=11), self.vocab)
        dropped = sum(
            1 for rec in recs
            if json.loads(oracle.respond("x" + prompt_trailer(rec.sample_id))) == [])
        assert abs(dropped - 300) <= 45

    def test_deterministic_across_instances(self):
        recs = [gt_sample(f"s{i}", [((1, 1, 9, 9), "tool"), ((20, 20, 40, 44), "glove")])
                for i in range(30)]
        noise = OracleNoise(p_drop=0.4, jitter_sigma=2.0, p_label_flip=0.3, seed=42)
        a = MockOracle(recs, noise, self.vocab)
        b = MockOracle(recs, noise, self.vocab)
        for rec in recs:
            prompt = "x" + prompt_trailer(rec.sample_id)
            assert a.respond(prompt) == b.respond(prompt)

    def test_jitter_moves_corners(self):
        rec = gt_sample("a", [((100, 100, 200, 200), "tool")])
        oracle = MockOracle([rec], OracleNoise(jitter_sigma=3.0, seed=7), self.vocab)
        [det] = json.loads(oracle.respond("x" + prompt_trailer("a")))
        assert det["bbox"] != [100.0, 100.0, 200.0, 200.0]
        assert np.allclose(det["bbox"], [100, 100, 200, 200], atol=15)

    def test_label_flip_stays_in_vocabulary(self):
        recs = [gt_sample(f"s{i}", [((1, 1, 50, 50), "tool")]) for i in range(50)]
        oracle = MockOracle(recs, OracleNoise(p_label_flip=1.0, seed=9), self.vocab)
        for rec in recs:
            [det] = json.loads(oracle.respond("x" + prompt_trailer(rec.sample_id)))
            assert det["label"] != "tool"
            assert det["label"] in self.vocab.labels

    def test_pass2_returns_label_of_max_iou_box(self):
        rec = gt_sample("a", [((0, 0, 10, 10), "tool"), ((40, 40, 80, 80), "helmet")])
        oracle = MockOracle([rec], OracleNoise(seed=1), self.vocab)
        answer = oracle.respond(
            "Which one..." + prompt_trailer("a", BBox(38, 38, 82, 82)))
        assert answer == "helmet"

    def test_pass2_flip(self):
        rec = gt_sample("a", [((0, 0, 10, 10), "tool")])
        oracle = MockOracle([rec], OracleNoise(p_label_flip=1.0, seed=2), self.vocab)
        answer = oracle.respond("Which" + prompt_trailer("a", BBox(0, 0, 10, 10)))
        assert answer != "tool" and answer in self.vocab.labels

    def test_unknown_sample(self):
        oracle = MockOracle([gt_sample("a", [])], OracleNoise(seed=1), self.vocab)
        with pytest.raises(UnknownSample):
            oracle.respond("no trailer at all")
        with pytest.raises(UnknownSample):
            oracle.respond("x" + prompt_trailer("missing"))

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            OracleNoise(p_drop=1.5)
        with pytest.raises(ValueError):
            OracleNoise(jitter_sigma=-1)
