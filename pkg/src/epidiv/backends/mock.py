"""Deterministic in-process backends driven by hidden ``[[k<int>]]`` class tags.

* generation samples tagged claim sentences from a population spec;
* the decomposer echoes every tagged sentence of its input, one per line;
* embeddings put same-tag texts at cosine >= 0.9 and different tags near 0;
* entailment holds iff both texts carry the same tag.

Everything is a pure function of (input, seed).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..models import stable_hash
from ..synthetic import PopulationSpec, render_claim, sample_classes, tag_of
from .base import (
    EmbeddingBackend,
    EntailmentBackend,
    EntailmentJudgment,
    GenerationBackend,
    GenerationRequest,
)

SAME_TAG = {"entailment": 0.9, "neutral": 0.08, "contradiction": 0.02}
DIFFERENT_TAG = {"entailment": 0.05, "neutral": 0.9, "contradiction": 0.05}


def _seed(*parts) -> int:
    return int(stable_hash(*parts, length=16), 16)


@dataclass(frozen=True)
class MockSpec:
    population: PopulationSpec = field(default_factory=lambda: PopulationSpec(classes=3))
    sentences_per_response: int = 6
    seed: int = 0
    dim: int = 384
    noise: float = 0.2
    delay_s: float = 0.0
    max_in_flight: int = 1

    @classmethod
    def from_options(cls, options) -> MockSpec:
        opts = dict(options)
        pop = PopulationSpec.from_dict(opts.pop("population", {"classes": 3}))
        opts.pop("role", None)
        opts.pop("multilingual", None)
        return cls(population=pop, **opts)


class _Instrumented:
    def _init_instrumentation(self, delay_s: float):
        self.delay_s = delay_s
        self.in_flight = 0
        self.peak_in_flight = 0
        self._ilock = threading.Lock()

    def _enter(self):
        with self._ilock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        if self.delay_s:
            time.sleep(self.delay_s)

    def _exit(self):
        with self._ilock:
            self.in_flight -= 1


class MockGenerationBackend(GenerationBackend, _Instrumented):
    def __init__(self, spec: MockSpec):
        super().__init__(spec.max_in_flight)
        self.spec = spec
        self._init_instrumentation(spec.delay_s)

    def _generate(self, req: GenerationRequest) -> str:
        self._enter()
        try:
            rng = np.random.default_rng(_seed("generate", self.spec.seed, req.prompt, req.seed))
            pop = self.spec.population
            ks = sample_classes(pop, self.spec.sentences_per_response, rng)
            variants = rng.integers(0, len(pop.phrasings), size=ks.size)
            return " ".join(render_claim(int(k), int(v), pop) for k, v in zip(ks, variants))
        finally:
            self._exit()


class MockDecomposerBackend(GenerationBackend, _Instrumented):
    """Identity decomposition: every tagged sentence in the prompt becomes one line."""

    def __init__(self, spec: MockSpec | None = None):
        spec = spec or MockSpec()
        super().__init__(spec.max_in_flight)
        self._init_instrumentation(spec.delay_s)

    def _generate(self, req: GenerationRequest) -> str:
        from ..corpus import split_sentences

        self._enter()
        try:
            lines = [s for s in split_sentences(req.prompt) if tag_of(s) is not None]
            return "\n".join(lines) if lines else "EMPTY"
        finally:
            self._exit()


class MockEmbeddingBackend(EmbeddingBackend, _Instrumented):
    def __init__(self, spec: MockSpec | None = None, multilingual: bool = True):
        spec = spec or MockSpec()
        super().__init__(spec.max_in_flight)
        self.spec = spec
        self.multilingual = multilingual
        self._init_instrumentation(spec.delay_s)
        self._class_vectors: dict[int, np.ndarray] = {}

    def _unit(self, *key) -> np.ndarray:
        v = np.random.default_rng(_seed(*key)).standard_normal(self.spec.dim)
        return v / np.linalg.norm(v)

    def vector(self, text: str) -> np.ndarray:
        k = tag_of(text)
        noise = self._unit("text", self.spec.dim, text)
        if k is None:
            return noise
        base = self._class_vectors.get(k)
        if base is None:
            base = self._class_vectors[k] = self._unit("class", self.spec.dim, k)
        return base + self.spec.noise * noise

    def _embed(self, texts):
        self._enter()
        try:
            return [self.vector(t) for t in texts]
        finally:
            self._exit()


class MockEntailmentBackend(EntailmentBackend, _Instrumented):
    def __init__(self, spec: MockSpec | None = None):
        spec = spec or MockSpec()
        super().__init__(spec.max_in_flight)
        self._init_instrumentation(spec.delay_s)

    def _entails(self, premise, hypothesis):
        self._enter()
        try:
            a, b = tag_of(premise), tag_of(hypothesis)
            same = a is not None and a == b
            return EntailmentJudgment.from_probs(SAME_TAG if same else DIFFERENT_TAG)
        finally:
            self._exit()


def mock_suite(spec: MockSpec):
    """Generation, embedding and entailment mocks sharing one spec."""
    return MockGenerationBackend(spec), MockEmbeddingBackend(spec), MockEntailmentBackend(spec)
