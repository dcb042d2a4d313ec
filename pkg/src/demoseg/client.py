"""Language-model clients.

Wire protocol (JSON over HTTP POST)::

    request  = {"model": str, "messages": [{"role": str, "content": str}], "temperature": float}
    response = {"content": str}

Credentials, when needed, come from the environment variable named by
``api_key_env`` and are sent as a bearer token.
"""
from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from typing import Callable, List, Optional

from .errors import ClientError

log = logging.getLogger(__name__)

API_KEY_ENV = "DEMOSEG_API_KEY"


class LabelClient:
    """HTTP chat-completion client with a fixed retry schedule."""

    mock = False

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        temperature: float = 0.0,
        api_key_env: str = API_KEY_ENV,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.temperature = temperature
        self.api_key_env = api_key_env
        self._sleep = sleep

    def request_body(self, messages: List[dict]) -> dict:
        return {"model": self.model, "messages": messages, "temperature": self.temperature}

    def _post(self, body: dict) -> str:
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=data, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        if not isinstance(payload, dict) or not isinstance(payload.get("content"), str):
            raise ValueError(f"response lacks a 'content' string: {payload!r}"[:300])
        return payload["content"]

    def chat(self, messages: List[dict]) -> str:
        body = self.request_body(messages)
        last: Optional[Exception] = None
        for attempt in range(self.attempts):
            try:
                return self._post(body)
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
                log.warning("LLM request failed (attempt %d/%d): %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self._sleep(self.backoff * 2**attempt)
        raise ClientError(f"LLM request to {self.endpoint} failed after {self.attempts} attempts: {last}")

    def complete(self, prompt: str) -> str:
        return self.chat([{"role": "user", "content": prompt}])


class MockClient(LabelClient):
    """Offline client; subclasses override :meth:`respond`. Stateless, so reentrant."""

    mock = True

    def __init__(self, model: str = "mock"):
        super().__init__(endpoint="mock://", model=model, attempts=1)

    def respond(self, prompt: str) -> str:
        raise NotImplementedError

    def chat(self, messages: List[dict]) -> str:
        return self.respond(messages[-1]["content"])


class CallableClient(MockClient):
    """Wrap a plain ``prompt -> reply`` function."""

    def __init__(self, fn: Callable[[str], str], model: str = "callable"):
        super().__init__(model)
        self._fn = fn

    def respond(self, prompt: str) -> str:
        return self._fn(prompt)
