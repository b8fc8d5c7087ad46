"""Chat-completion endpoint client with bounded retries.

Speaks the common POST /v1/chat/completions shape. Requests are pinned
deterministic: temperature 0 and a fixed seed field (ignored by servers
that do not support it). Transient failures (connection errors, HTTP 429
and 5xx) are retried with exponential backoff plus jitter; anything else
fails immediately.
"""

from __future__ import annotations

import os
import random
import time

import requests

from .errors import EndpointUnavailable

API_KEY_ENV = "JIMPACT_API_KEY"


class LlmClient:
    """Thin handle around one endpoint + model pair.

    ``n_calls`` counts completed successful round-trips, ``n_attempts``
    every HTTP attempt; both feed the run manifest.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff_base: float = 0.5,
        rng: random.Random | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._rng = rng or random.Random()
        self._session = requests.Session()
        self.n_calls = 0
        self.n_attempts = 0

    def chat(self, messages: list[dict], max_tokens: int = 256) -> str:
        """Send one chat request and return the first choice's content."""
        url = f"{self.base_url}/v1/chat/completions"
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": 0,
            "max_tokens": max_tokens,
            "seed": 0,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error = "no attempts made"
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay + self._rng.uniform(0, delay))
            self.n_attempts += 1
            try:
                resp = self._session.post(
                    url, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 200:
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    last_error = f"malformed completion envelope: {exc}"
                    continue
                self.n_calls += 1
                return content
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            raise EndpointUnavailable(
                f"endpoint rejected request: HTTP {resp.status_code}"
            )
        raise EndpointUnavailable(
            f"gave up after {self.max_attempts} attempts; last error: {last_error}"
        )
