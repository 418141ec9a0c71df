from __future__ import annotations

import json
import threading
import time
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from draftloop.backend import (
    BadStatus,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    HttpEmbedder,
    MockBackend,
    ReplayBackend,
    ScriptMismatch,
    Timeout,
    Transport,
    mock_from_script,
)
from draftloop.engine import EngineConfig, run
from draftloop.model import UserQuery

from support import fourteen_step_script, make_corpus


class _StubServer(ThreadingHTTPServer):
    """Chat-completion stub: serves a fixed plan or a prompt-matched script."""

    def __init__(self, address, handler):
        super().__init__(address, handler)
        self.plan: list[dict] = []
        self.script: list[dict] | None = None
        self.requests: list[tuple[dict, dict]] = []
        self.lock = threading.Lock()


class _StubHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _reply(self, status: int, payload: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _ok(self, content: str) -> None:
        body = json.dumps(
            {
                "choices": [{"message": {"content": content}}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 5},
            }
        ).encode("utf-8")
        self._reply(200, body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length) or b"{}")
        server: _StubServer = self.server  # type: ignore[assignment]
        with server.lock:
            server.requests.append((dict(self.headers), body))
            if server.script is not None:
                prompt = body["messages"][-1]["content"]
                for step in server.script:
                    if not step["used"] and step["matcher"] in prompt:
                        step["used"] = True
                        return self._ok(step["response"])
                return self._reply(400, b'{"error": "no script step matched"}')
            item = server.plan.pop(0) if server.plan else {"status": 200, "content": "ok"}
        if item.get("sleep"):
            time.sleep(item["sleep"])
        if item.get("raw") is not None:
            return self._reply(item.get("status", 200), item["raw"].encode("utf-8"))
        if item.get("status", 200) != 200:
            return self._reply(item["status"], b'{"error": "stub failure"}')
        self._ok(item.get("content", "ok"))


@contextmanager
def stub_server(plan: list[dict] | None = None, script: list[tuple[str, str]] | None = None):
    server = _StubServer(("127.0.0.1", 0), _StubHandler)
    server.plan = list(plan or [])
    if script is not None:
        server.script = [
            {"matcher": m, "response": r, "used": False} for m, r in script
        ]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server, f"http://127.0.0.1:{server.server_address[1]}/v1/chat"
    finally:
        server.shutdown()
        server.server_close()


def req(text: str = "hello") -> ChatRequest:
    return ChatRequest(messages=[("user", text)])


def test_chat_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(messages=[])
    with pytest.raises(ValueError):
        ChatRequest(messages=[("narrator", "x")])
    with pytest.raises(ValueError):
        ChatRequest(messages=[("user", "x"), ("assistant", "y")])
    with pytest.raises(ValueError):
        ChatRequest(messages=[("user", "x")], temperature=-0.1)
    with pytest.raises(ValueError):
        ChatRequest(messages=[("user", "x")], max_output=0)
    ok = ChatRequest(messages=[("system", "s"), ("user", "u")], temperature=0.5)
    assert ok.last_user_content() == "u"


def test_http_backend_success_and_usage():
    with stub_server(plan=[{"content": "reply text"}]) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", retries=0)
        resp = backend.complete(req("ping"))
    assert resp.content == "reply text"
    assert resp.usage == (3, 5)
    assert resp.latency > 0
    headers, body = server.requests[0]
    assert body["model"] == "m"
    assert body["messages"] == [{"role": "user", "content": "ping"}]
    assert body["temperature"] == 0.0
    assert body["max_tokens"] == 4096


def test_http_backend_sends_credential_when_set(monkeypatch):
    monkeypatch.setenv("STUB_KEY", "sekrit")
    with stub_server(plan=[{"content": "x"}]) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", credential_env="STUB_KEY", retries=0)
        backend.complete(req())
    headers, _ = server.requests[0]
    assert headers.get("Authorization") == "Bearer sekrit"


def test_http_backend_omits_credential_when_unset(monkeypatch):
    monkeypatch.delenv("STUB_KEY", raising=False)
    with stub_server(plan=[{"content": "x"}]) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", credential_env="STUB_KEY", retries=0)
        backend.complete(req())
    headers, _ = server.requests[0]
    assert "Authorization" not in headers


def test_http_backend_retries_transient_500s():
    plan = [{"status": 500}, {"status": 500}, {"content": "finally"}]
    with stub_server(plan=plan) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", retries=3, backoff=0.001)
        resp = backend.complete(req())
        assert resp.content == "finally"
        assert len(server.requests) == 3


def test_http_backend_exhausts_retries():
    plan = [{"status": 503}, {"status": 503}]
    with stub_server(plan=plan) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", retries=1, backoff=0.001)
        with pytest.raises(BadStatus) as exc:
            backend.complete(req())
        assert exc.value.code == 503
        assert len(server.requests) == 2


def test_http_backend_zero_retries_single_attempt():
    plan = [{"status": 500}]
    with stub_server(plan=plan) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", retries=0)
        with pytest.raises(BadStatus):
            backend.complete(req())
        assert len(server.requests) == 1


def test_http_backend_non_retryable_fails_fast():
    plan = [{"status": 404}]
    with stub_server(plan=plan) as (server, url):
        backend = HttpBackend(endpoint=url, model="m", retries=3, backoff=0.001)
        with pytest.raises(BadStatus) as exc:
            backend.complete(req())
        assert exc.value.code == 404
        assert len(server.requests) == 1


def test_http_backend_timeout():
    plan = [{"sleep": 1.0, "content": "late"}]
    with stub_server(plan=plan) as (_, url):
        backend = HttpBackend(endpoint=url, model="m", retries=0, timeout=0.15)
        with pytest.raises(Timeout):
            backend.complete(req())


def test_http_backend_connection_error_is_transport():
    backend = HttpBackend(
        endpoint="http://127.0.0.1:9/unroutable", model="m", retries=0, timeout=0.5
    )
    with pytest.raises(Transport):
        backend.complete(req())


def test_http_backend_malformed_payload():
    plan = [{"raw": '{"unexpected": true}'}]
    with stub_server(plan=plan) as (_, url):
        backend = HttpBackend(endpoint=url, model="m", retries=0)
        with pytest.raises(Transport):
            backend.complete(req())


def test_mock_backend_first_unconsumed_match():
    backend = MockBackend([("alpha", "one"), ("alpha", "two"), ("beta", "three")])
    assert backend.complete(req("say alpha")).content == "one"
    assert backend.complete(req("say alpha")).content == "two"
    assert backend.complete(req("say beta now")).content == "three"
    assert backend.consumed_count == 3
    assert backend.remaining == 0


def test_mock_backend_mismatch():
    backend = MockBackend([("alpha", "one")])
    with pytest.raises(ScriptMismatch):
        backend.complete(req("nothing matches"))
    backend.complete(req("alpha"))
    with pytest.raises(ScriptMismatch):
        backend.complete(req("alpha again"))


def test_mock_backend_requires_steps():
    with pytest.raises(ValueError):
        MockBackend([])
    assert isinstance(mock_from_script([("a", "b")]), MockBackend)


def test_replay_backend_sequence_and_exhaustion():
    backend = ReplayBackend(["first", "second"])
    assert backend.complete(req("whatever")).content == "first"
    assert backend.complete(req("ignored")).content == "second"
    with pytest.raises(ScriptMismatch):
        backend.complete(req("one too many"))


def test_http_embedder():
    vectors = {"data": [{"embedding": [1.0, 2.0]}, {"embedding": [3.0, 4.0]}]}
    plan = [{"raw": json.dumps(vectors)}]
    with stub_server(plan=plan) as (server, url):
        embedder = HttpEmbedder(endpoint=url, model="emb", retries=0)
        got = embedder(["first text", "second text"])
    assert got == [[1.0, 2.0], [3.0, 4.0]]
    _, body = server.requests[0]
    assert body == {"model": "emb", "input": ["first text", "second text"]}


def test_http_embedder_retries():
    vectors = {"data": [{"embedding": [0.5]}]}
    plan = [{"status": 429}, {"raw": json.dumps(vectors)}]
    with stub_server(plan=plan) as (server, url):
        embedder = HttpEmbedder(endpoint=url, model="emb", retries=2, backoff=0.001)
        assert embedder(["x"]) == [[0.5]]
        assert len(server.requests) == 2


def test_engine_run_identical_via_mock_and_http():
    """The engine cannot tell a live endpoint from the scripted mock."""
    index = make_corpus(50)
    query = UserQuery("How do regional grids balance demand?")
    cfg = EngineConfig()

    report_mock, _ = run(query, MockBackend(fourteen_step_script()), index, cfg)
    with stub_server(script=fourteen_step_script()) as (_, url):
        backend = HttpBackend(endpoint=url, model="m", retries=0)
        report_http, _ = run(query, backend, index, cfg)
    assert report_http.rendered == report_mock.rendered
    assert report_http.to_dict() == report_mock.to_dict()
