"""Chat-completion backend contract: HTTP endpoint, scripted mock, replay.

The engine only ever calls ``complete(request)``; whether the answer comes
from a live endpoint, a substring-matched script, or a recorded trajectory
is invisible to it.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from typing import Protocol

import requests

DEFAULT_MAX_IN_FLIGHT = 4
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})

ENV_ENDPOINT = "DRAFTLOOP_ENDPOINT"
ENV_CREDENTIAL = "DRAFTLOOP_API_KEY"
ENV_MODEL = "DRAFTLOOP_MODEL"


class BackendError(Exception):
    pass


class Transport(BackendError):
    pass


class Timeout(BackendError):
    pass


class BadStatus(BackendError):
    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"backend returned status {code}" + (f": {detail}" if detail else ""))
        self.code = code


class ScriptMismatch(BackendError):
    pass


@dataclass
class ChatRequest:
    """One model call: ordered chat messages plus decoding knobs."""

    messages: list[tuple[str, str]]
    temperature: float = 0.0
    max_output: int = 4096

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        roles = {role for role, _ in self.messages}
        bad = roles - {"system", "user", "assistant"}
        if bad:
            raise ValueError(f"unknown message roles: {sorted(bad)}")
        if self.messages[-1][0] != "user":
            raise ValueError("last message must be from the user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output < 1:
            raise ValueError("max_output must be positive")

    def last_user_content(self) -> str:
        return self.messages[-1][1]


@dataclass
class ChatResponse:
    content: str
    usage: tuple[int, int] = (0, 0)  # (prompt units, completion units)
    latency: float = 0.0


class Backend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """Plain chat-completion HTTP client with retry/backoff and an in-flight cap.

    The credential is read from the environment at call time so rotation does
    not require rebuilding the backend handle.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        credential_env: str = ENV_CREDENTIAL,
        retries: int = 3,
        backoff: float = 0.2,
        timeout: float = 120.0,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.credential_env = credential_env
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        endpoint = os.environ.get(ENV_ENDPOINT)
        model = os.environ.get(ENV_MODEL)
        if not endpoint or not model:
            raise BackendError(
                f"set {ENV_ENDPOINT} and {ENV_MODEL} to use the HTTP backend"
            )
        return cls(endpoint=endpoint, model=model, **kwargs)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        credential = os.environ.get(self.credential_env, "")
        if credential:
            headers["Authorization"] = f"Bearer {credential}"
        return headers

    def complete(self, req: ChatRequest) -> ChatResponse:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output,
        }
        last_error: BackendError = Transport("no attempt made")
        start = time.monotonic()
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    resp = self._session.post(
                        self.endpoint,
                        json=body,
                        headers=self._headers(),
                        timeout=self.timeout,
                    )
            except requests.Timeout:
                last_error = Timeout(f"request to {self.endpoint} timed out")
                continue
            except requests.RequestException as exc:
                last_error = Transport(str(exc))
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = BadStatus(resp.status_code, resp.text[:200])
                continue
            if resp.status_code != 200:
                raise BadStatus(resp.status_code, resp.text[:200])
            return self._parse(resp, time.monotonic() - start)
        raise last_error

    def _parse(self, resp: requests.Response, latency: float) -> ChatResponse:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise Transport(f"malformed completion payload: {exc}") from None
        usage = data.get("usage") or {}
        return ChatResponse(
            content=content,
            usage=(
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            ),
            latency=latency,
        )


@dataclass
class _ScriptStep:
    matcher: str
    response: str
    consumed: bool = False


class MockBackend:
    """Deterministic scripted backend for offline runs.

    Each call consumes the first unconsumed step whose matcher substring
    occurs in the last user message; consumption is lock-serialized so
    concurrent callers cannot race a script out of order.
    """

    def __init__(self, steps: list[tuple[str, str]]):
        if not steps:
            raise ValueError("script needs at least one step")
        self._steps = [_ScriptStep(m, r) for m, r in steps]
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        prompt = req.last_user_content()
        with self._lock:
            for step in self._steps:
                if not step.consumed and step.matcher in prompt:
                    step.consumed = True
                    return ChatResponse(content=step.response)
        head = prompt[:160].replace("\n", " ")
        raise ScriptMismatch(
            f"no unconsumed script step matches request starting with: {head!r}"
        )

    @property
    def consumed_count(self) -> int:
        return sum(1 for s in self._steps if s.consumed)

    @property
    def remaining(self) -> int:
        return sum(1 for s in self._steps if not s.consumed)


class ReplayBackend:
    """Replays recorded raw outputs in order, ignoring prompt content."""

    def __init__(self, outputs: list[str]):
        self._outputs = list(outputs)
        self._next = 0
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._next >= len(self._outputs):
                raise ScriptMismatch(
                    f"replay exhausted after {len(self._outputs)} outputs"
                )
            content = self._outputs[self._next]
            self._next += 1
        return ChatResponse(content=content)


def mock_from_script(steps: list[tuple[str, str]]) -> MockBackend:
    return MockBackend(steps)


class HttpEmbedder:
    """Embedding endpoint speaking the same wire conventions as HttpBackend."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        credential_env: str = ENV_CREDENTIAL,
        retries: int = 3,
        backoff: float = 0.2,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.credential_env = credential_env
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._session = session or requests.Session()

    def __call__(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        credential = os.environ.get(self.credential_env, "")
        if credential:
            headers["Authorization"] = f"Bearer {credential}"
        last_error: BackendError = Transport("no attempt made")
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    self.endpoint,
                    json={"model": self.model, "input": texts},
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.Timeout:
                last_error = Timeout(f"request to {self.endpoint} timed out")
                continue
            except requests.RequestException as exc:
                last_error = Transport(str(exc))
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = BadStatus(resp.status_code, resp.text[:200])
                continue
            if resp.status_code != 200:
                raise BadStatus(resp.status_code, resp.text[:200])
            try:
                data = resp.json()
                return [entry["embedding"] for entry in data["data"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise Transport(f"malformed embedding payload: {exc}") from None
        raise last_error
