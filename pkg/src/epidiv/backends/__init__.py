"""Service interfaces for generation, embedding and entailment."""

from __future__ import annotations

from ..models import BackendDescriptor, BackendKind
from .base import (
    AuthError,
    BackendError,
    BackendUnavailable,
    DimMismatch,
    EmbeddingBackend,
    EmbeddingVector,
    EmptyBatch,
    EntailmentBackend,
    EntailmentJudgment,
    GenerationBackend,
    GenerationRequest,
    RequestRejected,
    ResponseMalformed,
)
from .mock import (
    MockDecomposerBackend,
    MockEmbeddingBackend,
    MockEntailmentBackend,
    MockGenerationBackend,
    MockSpec,
    mock_suite,
)

__all__ = [
    "AuthError",
    "BackendError",
    "BackendUnavailable",
    "DimMismatch",
    "EmbeddingBackend",
    "EmbeddingVector",
    "EmptyBatch",
    "EntailmentBackend",
    "EntailmentJudgment",
    "GenerationBackend",
    "GenerationRequest",
    "MockDecomposerBackend",
    "MockEmbeddingBackend",
    "MockEntailmentBackend",
    "MockGenerationBackend",
    "MockSpec",
    "RequestRejected",
    "ResponseMalformed",
    "generate",
    "embed_batch",
    "entails",
    "make_backend",
    "mock_suite",
]


def generate(backend: GenerationBackend, req: GenerationRequest) -> str:
    return backend.generate(req)


def embed_batch(backend: EmbeddingBackend, texts) -> list[EmbeddingVector]:
    return backend.embed_batch(texts)


def entails(backend: EntailmentBackend, premise: str, hypothesis: str) -> EntailmentJudgment:
    return backend.entails(premise, hypothesis)


def make_backend(descriptor: BackendDescriptor, **client_kw):
    """Instantiate a backend from its descriptor; ``mock://`` URLs give in-process mocks."""
    if descriptor.endpoint_url.startswith("mock://"):
        spec = MockSpec.from_options({**descriptor.options, "max_in_flight": descriptor.max_in_flight})
        if descriptor.kind is BackendKind.GENERATION:
            if descriptor.options.get("role") == "decomposer":
                return MockDecomposerBackend(spec)
            return MockGenerationBackend(spec)
        if descriptor.kind is BackendKind.EMBEDDING:
            return MockEmbeddingBackend(spec, multilingual=bool(descriptor.options.get("multilingual", True)))
        return MockEntailmentBackend(spec)

    from .http import HttpEmbeddingBackend, HttpEntailmentBackend, HttpGenerationBackend

    if descriptor.kind is BackendKind.GENERATION:
        return HttpGenerationBackend(descriptor, **client_kw)
    if descriptor.kind is BackendKind.EMBEDDING:
        return HttpEmbeddingBackend(descriptor, **client_kw)
    return HttpEntailmentBackend(descriptor, **client_kw)
