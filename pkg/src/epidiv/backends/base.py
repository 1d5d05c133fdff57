from __future__ import annotations

import threading
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..models import EpidivError

DEFAULT_MAX_BATCH = 64
LABELS = ("entailment", "neutral", "contradiction")


class BackendError(EpidivError):
    pass


class BackendUnavailable(BackendError):
    pass


class AuthError(BackendError):
    pass


class RequestRejected(BackendError):
    """A non-retryable 4xx other than an auth failure."""


class ResponseMalformed(BackendError):
    pass


class DimMismatch(BackendError):
    pass


class EmptyBatch(BackendError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    top_p: float = 0.9
    temperature: float = 1.0
    max_tokens: int = 2100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def normalize(values) -> EmbeddingVector:
    arr = np.asarray(values, dtype=float)
    norm = np.linalg.norm(arr)
    if not np.isfinite(norm) or norm == 0:
        raise ResponseMalformed("embedding has zero or non-finite norm")
    return EmbeddingVector(tuple((arr / norm).tolist()))


@dataclass(frozen=True)
class EntailmentJudgment:
    label: str
    prob: dict = field(default_factory=dict)

    @classmethod
    def from_probs(cls, probs) -> EntailmentJudgment:
        """Build a judgment whose label is the argmax, ties broken toward neutral."""
        try:
            p = {lab: float(probs[lab]) for lab in LABELS}
        except (KeyError, TypeError, ValueError) as exc:
            raise ResponseMalformed(f"entailment probabilities incomplete: {probs!r}") from exc
        total = sum(p.values())
        if any(v < 0 for v in p.values()) or abs(total - 1.0) > 1e-6:
            raise ResponseMalformed(f"entailment probabilities do not sum to 1: {probs!r}")
        best = max(p.values())
        tied = [lab for lab in LABELS if p[lab] == best]
        label = "neutral" if "neutral" in tied else tied[0]
        return cls(label=label, prob=p)

    @property
    def holds(self) -> bool:
        return self.label == "entailment"

    @property
    def p_entail(self) -> float:
        return self.prob.get("entailment", 0.0)


class _Admission:
    """Caps the number of overlapping requests to one backend."""

    def __init__(self, max_in_flight: int):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._sem = threading.BoundedSemaphore(max_in_flight)

    @contextmanager
    def slot(self):
        with self._sem:
            yield


class GenerationBackend:
    def __init__(self, max_in_flight: int = 1):
        self._admission = _Admission(max_in_flight)
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def max_in_flight(self) -> int:
        return self._admission.max_in_flight

    def generate(self, req: GenerationRequest) -> str:
        with self._admission.slot():
            with self._lock:
                self.calls += 1
            return self._generate(req)

    def _generate(self, req: GenerationRequest) -> str:
        raise NotImplementedError


class EmbeddingBackend:
    def __init__(self, max_in_flight: int = 1, max_batch: int = DEFAULT_MAX_BATCH):
        self._admission = _Admission(max_in_flight)
        self.max_batch = max_batch
        self.dim: int | None = None
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def max_in_flight(self) -> int:
        return self._admission.max_in_flight

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts:
            raise EmptyBatch("embed_batch needs at least one text")
        if len(texts) > self.max_batch:
            raise ValueError(f"batch of {len(texts)} exceeds the maximum of {self.max_batch}")
        with self._admission.slot():
            with self._lock:
                self.calls += 1
            raw = self._embed(texts)
        if len(raw) != len(texts):
            raise ResponseMalformed(f"expected {len(texts)} embeddings, got {len(raw)}")
        vectors = [normalize(v) for v in raw]
        with self._lock:
            for v in vectors:
                if self.dim is None:
                    self.dim = v.dim
                elif v.dim != self.dim:
                    raise DimMismatch(f"embedding dim {v.dim} differs from {self.dim} seen earlier")
        return vectors

    def embed_all(self, texts: Sequence[str]) -> np.ndarray:
        """Embed any number of texts in batches; returns a (len(texts), dim) unit-row matrix."""
        rows: list[EmbeddingVector] = []
        texts = list(texts)
        for start in range(0, len(texts), self.max_batch):
            rows.extend(self.embed_batch(texts[start : start + self.max_batch]))
        if not rows:
            return np.zeros((0, self.dim or 0))
        return np.array([r.values for r in rows], dtype=float)

    def _embed(self, texts: list[str]) -> list[Sequence[float]]:
        raise NotImplementedError


class EntailmentBackend:
    """Directional NLI judgments, cached per exact (premise, hypothesis) pair."""

    def __init__(self, max_in_flight: int = 1):
        self._admission = _Admission(max_in_flight)
        self._cache: dict[tuple[str, str], EntailmentJudgment] = {}
        self._pending: dict[tuple[str, str], threading.Event] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def max_in_flight(self) -> int:
        return self._admission.max_in_flight

    def entails(self, premise: str, hypothesis: str) -> EntailmentJudgment:
        if not premise or not hypothesis:
            raise ValueError("premise and hypothesis must be non-empty")
        key = (premise, hypothesis)
        while True:
            with self._lock:
                if key in self._cache:
                    return self._cache[key]
                event = self._pending.get(key)
                if event is None:
                    event = threading.Event()
                    self._pending[key] = event
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                with self._admission.slot():
                    with self._lock:
                        self.calls += 1
                    judgment = self._entails(premise, hypothesis)
                with self._lock:
                    self._cache[key] = judgment
                return judgment
            finally:
                with self._lock:
                    self._pending.pop(key, None)
                event.set()

    def _entails(self, premise: str, hypothesis: str) -> EntailmentJudgment:
        raise NotImplementedError
