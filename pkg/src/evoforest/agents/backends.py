"""Completion backends: a chat-endpoint HTTP client and a deterministic scripted replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Iterable
from pathlib import Path
from typing import Any, Protocol, Union

import httpx

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """The backend could not produce a completion (after its own retries)."""


class CompletionBackend(Protocol):
    def complete(self, system_prompt: str, user_prompt: str, *, temperature: float = 0.2) -> str: ...


def request_key(system_prompt: str, user_prompt: str) -> str:
    return hashlib.sha256(f"{system_prompt}\x00{user_prompt}".encode()).hexdigest()


Reply = Union[str, BackendError]
Responder = Callable[[str, str], str]


class ScriptedBackend:
    """Deterministic backend for tests and offline runs.

    Lookup order per request: a reply keyed by the request hash, then the
    ``responder`` callable, then the next entry of the ordered ``responses``.
    A :class:`BackendError` entry is raised instead of returned.
    """

    def __init__(
        self,
        responses: Iterable[Reply] = (),
        *,
        keyed: dict[str, Reply] | None = None,
        responder: Responder | None = None,
        record: bool = False,
    ) -> None:
        self.responses = list(responses)
        self.keyed = dict(keyed or {})
        self.responder = responder
        self.cursor = 0
        self.calls = 0
        self.record = record
        self.transcript: list[dict[str, str]] = []
        self._lock = threading.Lock()

    def complete(self, system_prompt: str, user_prompt: str, *, temperature: float = 0.2) -> str:
        key = request_key(system_prompt, user_prompt)
        with self._lock:
            self.calls += 1
            if key in self.keyed:
                reply = self.keyed[key]
            elif self.responder is not None:
                reply = self.responder(system_prompt, user_prompt)
            elif self.cursor < len(self.responses):
                reply = self.responses[self.cursor]
                self.cursor += 1
            else:
                raise BackendError("script exhausted")
            if self.record:
                entry = {"key": key, "role": system_prompt.splitlines()[0] if system_prompt else ""}
                if isinstance(reply, BackendError):
                    entry["error"] = str(reply)
                else:
                    entry["response"] = reply
                self.transcript.append(entry)
        if isinstance(reply, BackendError):
            raise reply
        return reply

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> ScriptedBackend:
        """Load a replay file: one ``{"response": ...}`` or ``{"error": ...}`` per line.

        Lines that carry a ``key`` are matched by request hash instead of order.
        """
        ordered: list[Reply] = []
        keyed: dict[str, Reply] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            reply: Reply = BackendError(rec["error"]) if "error" in rec else rec["response"]
            if "key" in rec:
                keyed[rec["key"]] = reply
            else:
                ordered.append(reply)
        return cls(ordered, keyed=keyed)

    def dump_transcript(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.transcript:
                fh.write(json.dumps(entry) + "\n")

    def state_dict(self) -> dict[str, Any]:
        return {"cursor": self.cursor, "calls": self.calls}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.cursor = state.get("cursor", 0)
        self.calls = state.get("calls", 0)


class HttpBackend:
    """Client for a chat-completions style endpoint.

    POSTs ``{model, messages: [system, user], temperature}`` to
    ``<base_url>/chat/completions`` and reads ``choices[0].message.content``.
    The bearer credential comes from the environment variable named by
    ``api_key_env``.
    """

    RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str = "EVOFOREST_API_KEY",
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "").strip()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, system_prompt: str, user_prompt: str, *, temperature: float = 0.2) -> str:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "temperature": temperature,
        }
        last: str = ""
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.warning("completion attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code in self.RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                logger.warning("completion attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected response body: {exc}") from exc
            if not isinstance(content, str):
                raise BackendError("completion content is not text")
            return content
        raise BackendError(f"request failed after {self.retries + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()

    def state_dict(self) -> dict[str, Any]:
        return {}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        pass
