"""JSON-over-HTTP clients.

Generation speaks the OpenAI-compatible chat-completions schema. Embedding
POSTs ``{"model", "texts"}`` and expects ``{"embeddings": [[...], ...]}``.
Entailment POSTs ``{"model", "premise", "hypothesis"}`` and expects
``{"probs": {"entailment": p, "neutral": p, "contradiction": p}}``.
"""

from __future__ import annotations

import logging
import os
import random
import time

import httpx

from ..models import BackendDescriptor
from .base import (
    AuthError,
    BackendUnavailable,
    EmbeddingBackend,
    EntailmentBackend,
    EntailmentJudgment,
    GenerationBackend,
    GenerationRequest,
    RequestRejected,
    ResponseMalformed,
)

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class JsonClient:
    """POSTs JSON with retry, exponential backoff with jitter, and auth from the environment."""

    def __init__(self, descriptor: BackendDescriptor, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep, rng: random.Random | None = None):
        self.descriptor = descriptor
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._client = httpx.Client(timeout=descriptor.timeout_ms / 1000.0, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = self.descriptor.credential_env
        if env:
            secret = os.environ.get(env)
            if not secret:
                raise AuthError(f"credential environment variable {env} is not set")
            headers["Authorization"] = f"Bearer {secret}"
        return headers

    def backoff_seconds(self, attempt: int) -> float:
        base = self.descriptor.retry.base_backoff_ms / 1000.0
        return base * (2 ** (attempt - 1)) * (0.5 + self._rng.random())

    def post(self, body: dict) -> dict:
        headers = self._headers()
        url = self.descriptor.endpoint_url
        attempts = self.descriptor.retry.max_attempts
        last = "no attempt made"
        for attempt in range(1, attempts + 1):
            log.debug("POST %s attempt %d body=%s", url, attempt, body)
            try:
                resp = self._client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"{url} rejected credentials ({resp.status_code})")
                if resp.status_code < 400:
                    log.debug("response %d from %s: %s", resp.status_code, url, resp.text[:2000])
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ResponseMalformed(f"{url} returned non-JSON body") from exc
                if resp.status_code not in RETRYABLE_STATUS and resp.status_code < 500:
                    raise RequestRejected(f"{url} returned {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt < attempts:
                self._sleep(self.backoff_seconds(attempt))
        raise BackendUnavailable(f"{url} failed after {attempts} attempts ({last})")

    def close(self):
        self._client.close()


class HttpGenerationBackend(GenerationBackend):
    def __init__(self, descriptor: BackendDescriptor, **client_kw):
        super().__init__(descriptor.max_in_flight)
        self.descriptor = descriptor
        self.client = JsonClient(descriptor, **client_kw)

    def _generate(self, req: GenerationRequest) -> str:
        body = {
            "model": self.descriptor.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "top_p": req.top_p,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "seed": req.seed,
        }
        data = self.client.post(body)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseMalformed("chat completion lacks choices[0].message.content") from exc
        if content is None:
            return ""
        if not isinstance(content, str):
            raise ResponseMalformed("chat completion content is not a string")
        return content


class HttpEmbeddingBackend(EmbeddingBackend):
    def __init__(self, descriptor: BackendDescriptor, max_batch: int = 64, **client_kw):
        super().__init__(descriptor.max_in_flight, max_batch=max_batch)
        self.descriptor = descriptor
        self.multilingual = bool(descriptor.options.get("multilingual", False))
        self.client = JsonClient(descriptor, **client_kw)

    def _embed(self, texts):
        data = self.client.post({"model": self.descriptor.model_name, "texts": texts})
        vectors = data.get("embeddings") if isinstance(data, dict) else None
        if not isinstance(vectors, list):
            raise ResponseMalformed("embedding response lacks an 'embeddings' list")
        return vectors


class HttpEntailmentBackend(EntailmentBackend):
    def __init__(self, descriptor: BackendDescriptor, **client_kw):
        super().__init__(descriptor.max_in_flight)
        self.descriptor = descriptor
        self.client = JsonClient(descriptor, **client_kw)

    def _entails(self, premise, hypothesis):
        data = self.client.post(
            {"model": self.descriptor.model_name, "premise": premise, "hypothesis": hypothesis}
        )
        if not isinstance(data, dict) or "probs" not in data:
            raise ResponseMalformed("entailment response lacks 'probs'")
        return EntailmentJudgment.from_probs(data["probs"])
