from __future__ import annotations

import hashlib
import json
import threading
import time

import pytest
import requests

from mediaengine import events as ev
from mediaengine.events import (
    BackoffClient,
    BackoffPolicy,
    DeliveryFailed,
    DiscardClient,
    EventChannel,
    EventLog,
    EventRecord,
    HttpClient,
    LogCorrupt,
    MalformedEvent,
    UnsupportedMode,
    decode_http_request,
    encode_batch,
    encode_structured,
    event_api_routes,
)
from mediaengine.httpkit import HttpServer, ServerHandle, WebserverConfig


def record(i=0, source="/test", **kw):
    return EventRecord.new(source=source, type=f"com.example.thing.{i}", data={"i": i}, **kw)


class TestCodec:
    def test_structured_single(self):
        content_type, body = encode_structured(record())
        out = decode_http_request({"Content-Type": content_type}, body)
        assert len(out) == 1

    def test_batch_order_preserved(self):
        batch = [record(i) for i in range(3)]
        content_type, body = encode_batch(batch)
        out = decode_http_request({"Content-Type": content_type}, body)
        assert [e.type for e in out] == [e.type for e in batch]

    def test_binary_mode_unsupported(self):
        with pytest.raises(UnsupportedMode):
            decode_http_request({"Content-Type": "application/json", "ce-id": "1", "ce-source": "/x", "ce-type": "t"}, b"{}")

    def test_decode_encode_identity(self):
        batch = [record(i) for i in range(4)]
        content_type, body = encode_batch(batch)
        decoded = decode_http_request({"content-type": content_type}, body)
        assert decoded == batch
        single = record(9)
        content_type, body = encode_structured(single)
        assert decode_http_request({"content-type": content_type}, body) == [single]

    def test_atomic_rejection(self):
        batch = [record(0).to_json(), {"source": "/x"}]  # second lacks id/type
        body = json.dumps(batch).encode()
        with pytest.raises(MalformedEvent):
            decode_http_request({"Content-Type": ev.CONTENT_TYPE_BATCH}, body)

    def test_required_attributes(self):
        with pytest.raises(MalformedEvent):
            EventRecord.from_json({"id": "", "source": "/x", "type": "t"})


class TestClients:
    def test_discard_client_accepts_everything(self):
        DiscardClient().send([record()])
        DiscardClient().send_async_ack([record()])

    def test_backoff_client_attempts_and_delays(self):
        # fake clock records the delay sequence
        class FailingClient(ev.Client):
            def __init__(self):
                self.attempts = 0

            def send(self, events):
                self.attempts += 1
                raise DeliveryFailed("nope")

        delays: list[float] = []
        failing = FailingClient()
        client = BackoffClient(failing, policy=BackoffPolicy(initial_delay=0.01, factor=2, max_delay=1, total_cap=10),
                               max_attempts=3, sleep=delays.append)
        with pytest.raises(DeliveryFailed):
            client.send([record()])
        assert failing.attempts == 3
        assert delays == sorted(delays)
        assert len(delays) == 2

    def test_backoff_total_cap_bounds_retries(self):
        policy = BackoffPolicy(initial_delay=1, factor=2, max_delay=10, total_cap=4)
        assert sum(policy.delays()) <= 4

    def test_backoff_succeeds_after_transient_failure(self):
        class Flaky(ev.Client):
            def __init__(self):
                self.attempts = 0

            def send(self, events):
                self.attempts += 1
                if self.attempts < 3:
                    raise DeliveryFailed("transient")

        flaky = Flaky()
        BackoffClient(flaky, policy=BackoffPolicy(initial_delay=0.001, total_cap=1), sleep=lambda d: None).send([record()])
        assert flaky.attempts == 3


class TestEventAPI:
    @pytest.fixture()
    def server(self):
        channel = EventChannel()
        server = HttpServer(WebserverConfig(bind_address="127.0.0.1:0"))
        server.add_routes(event_api_routes(channel))
        with ServerHandle(server) as handle:
            yield handle, channel

    def test_sync_post_blocks_until_consumer_accepts(self, server):
        handle, channel = server
        content_type, body = encode_structured(record())
        got: list = []

        def consume():
            time.sleep(0.1)
            got.append(channel.get(timeout=2))

        t = threading.Thread(target=consume)
        t.start()
        started = time.monotonic()
        resp = requests.post(f"{handle.base_url()}/events", data=body, headers={"Content-Type": content_type}, timeout=5)
        elapsed = time.monotonic() - started
        t.join()
        assert resp.status_code == 200
        assert elapsed >= 0.09
        assert got[0].source == "/test"

    def test_async_posts_202_before_consumer_runs(self, server):
        handle, channel = server
        content_type, body = encode_batch([record(i) for i in range(3)])
        resp = requests.post(f"{handle.base_url()}/events?async=true", data=body,
                             headers={"Content-Type": content_type}, timeout=5)
        assert resp.status_code == 202
        received = [channel.get(timeout=2) for _ in range(3)]
        assert [e.data["i"] for e in received] == [0, 1, 2]

    def test_malformed_body_is_400(self, server):
        handle, _ = server
        resp = requests.post(f"{handle.base_url()}/events", data=b"{nope",
                             headers={"Content-Type": ev.CONTENT_TYPE_STRUCTURED}, timeout=5)
        assert resp.status_code == 400

    def test_closed_consumer_is_503(self, server):
        handle, channel = server
        channel.close()
        content_type, body = encode_structured(record())
        resp = requests.post(f"{handle.base_url()}/events", data=body, headers={"Content-Type": content_type}, timeout=5)
        assert resp.status_code == 503

    def test_async_ack_client_round_trip(self, server):
        handle, channel = server
        client = HttpClient(f"{handle.base_url()}/events")
        client.send_async_ack([record(5)])
        got = channel.get(timeout=2)
        assert got.data["i"] == 5


class TestEventLog:
    def test_append_replay_order(self, tmp_path):
        log = EventLog(str(tmp_path))
        e1, e2 = record(1), record(2)
        assert log.append("events.wf.t", e1) == 1
        assert log.append("events.wf.t", e2) == 2
        assert [e.id for e in log.replay("events.wf.t")] == [e1.id, e2.id]

    def test_replay_empty_subject(self, tmp_path):
        assert EventLog(str(tmp_path)).replay("events.none.x") == []

    def test_restart_preserves_order(self, tmp_path):
        # restart harness compares digests of the replayed sequence
        log = EventLog(str(tmp_path))
        written = [record(i) for i in range(100)]
        for e in written:
            log.append("events.wf.t", e)
        digest_before = hashlib.sha256(json.dumps([e.to_json() for e in log.replay("events.wf.t")]).encode()).hexdigest()

        reopened = EventLog(str(tmp_path))
        replayed = reopened.replay("events.wf.t")
        digest_after = hashlib.sha256(json.dumps([e.to_json() for e in replayed]).encode()).hexdigest()
        assert digest_before == digest_after
        assert len(replayed) == 100

    def test_duplicate_append_idempotent(self, tmp_path):
        log = EventLog(str(tmp_path))
        e = record(1)
        seq1 = log.append("s", e)
        seq2 = log.append("s", e)
        assert seq1 == seq2 == 1
        assert len(log.replay("s")) == 1

    def test_duplicate_detection_survives_restart(self, tmp_path):
        log = EventLog(str(tmp_path))
        e = record(1)
        log.append("s", e)
        reopened = EventLog(str(tmp_path))
        assert reopened.append("s", e) == 1

    def test_corrupt_record_detected(self, tmp_path):
        log = EventLog(str(tmp_path))
        log.append("s", record(1))
        path = log._path("s")
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-10] + b"corrupted\n")
        with pytest.raises(LogCorrupt):
            EventLog(str(tmp_path)).replay("s")

    def test_replay_determinism(self, tmp_path):
        log = EventLog(str(tmp_path))
        for i in range(10):
            log.append("s", record(i))
        a = [e.to_json() for e in log.replay("s")]
        b = [e.to_json() for e in log.replay("s")]
        assert a == b
