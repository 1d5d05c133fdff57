"""Run manifests: parsing, validation and seed derivation."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .clustering import ClusterParams
from .corpus import DecompositionPromptId
from .models import (
    PLACEHOLDER,
    BackendDescriptor,
    BackendKind,
    EpidivError,
    GenerationSetting,
    PromptTemplate,
    Topic,
    _canonical,
)
from .retrieval import MIN_PAGE_CHARS, MIN_PARAGRAPH_CHARS, SIMILARITY_FLOOR, TOKEN_BUDGET


@dataclass(frozen=True)
class Violation:
    code: str
    path: str
    message: str

    def __str__(self):
        return f"{self.code} at {self.path}: {self.message}"


class ManifestError(EpidivError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


def derive_seed(run_seed: int, stage: str, cell_id: str) -> int:
    """Per-cell seed: 63 bits of sha256 over (run seed, stage, cell id)."""
    digest = hashlib.sha256(_canonical([run_seed, stage, cell_id]).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# execution knobs that cannot change any output
_UNHASHED = ("workers",)


def config_hash(raw: Mapping[str, Any]) -> str:
    kept = {k: v for k, v in raw.items() if k not in _UNHASHED}
    return hashlib.sha256(_canonical(kept).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GeneratorConfig:
    id: str
    backend: BackendDescriptor
    settings: tuple[GenerationSetting, ...] = (GenerationSetting.IFT,)


@dataclass(frozen=True)
class SearchConfig:
    pages_dir: str | None = None
    include_baseline: bool = True
    similarity_floor: float | str = SIMILARITY_FLOOR
    token_budget: int = TOKEN_BUDGET
    min_page_chars: int = MIN_PAGE_CHARS
    min_paragraph_chars: int = MIN_PARAGRAPH_CHARS


@dataclass(frozen=True)
class RunManifest:
    topics: tuple[Topic, ...]
    templates: tuple[PromptTemplate, ...]
    generators: tuple[GeneratorConfig, ...]
    decomposer: BackendDescriptor
    embedding: BackendDescriptor
    entailment: BackendDescriptor
    output_dir: str
    run_id: str
    seed: int = 0
    cluster_params: ClusterParams = ClusterParams()
    rarefaction_resamples: int = 100
    bootstrap_resamples: int = 1000
    bootstrap_level: float = 0.95
    decomposition_prompt: DecompositionPromptId = DecompositionPromptId.P3
    top_p: float = 0.9
    temperature: float = 1.0
    max_tokens: int = 2100
    search: SearchConfig = SearchConfig()
    references_dir: str | None = None
    generated_language: str = "en"
    match_top_k: int = 6
    workers: int = 4
    base_dir: str = "."
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def run_dir(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute():
            out = Path(self.base_dir) / out
        return out / self.run_id

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def topic(self, topic_id: str) -> Topic:
        for t in self.topics:
            if t.id == topic_id:
                return t
        raise KeyError(topic_id)


_BACKEND_KEYS = ("decomposer", "embedding", "entailment")


def _check_backend(raw, path: str, expected: BackendKind | None, out: list[Violation]):
    if not isinstance(raw, Mapping):
        out.append(Violation("InvalidBackend", path, "backend must be an object"))
        return
    try:
        desc = BackendDescriptor.from_dict(raw)
    except (KeyError, ValueError, TypeError) as exc:
        out.append(Violation("InvalidBackend", path, f"unparseable backend descriptor ({exc})"))
        return
    if desc.max_in_flight < 1:
        out.append(Violation("InvalidBackend", f"{path}.max_in_flight", "must be >= 1"))
    if desc.retry.max_attempts < 1:
        out.append(Violation("InvalidBackend", f"{path}.retry.max_attempts", "must be >= 1"))
    if desc.retry.base_backoff_ms < 0 or desc.timeout_ms <= 0:
        out.append(Violation("InvalidBackend", path, "backoff must be >= 0 and timeout positive"))
    if expected is not None and desc.kind is not expected:
        out.append(Violation("InvalidBackend", f"{path}.kind", f"expected {expected.value}, got {desc.kind.value}"))
    if not desc.endpoint_url.startswith(("http://", "https://", "mock://")):
        out.append(Violation("InvalidBackend", f"{path}.endpoint_url", "must be http(s):// or mock://"))


def validate_run_manifest(raw: Mapping[str, Any]) -> list[Violation]:
    """Machine-readable violations of a parsed manifest; empty when it is valid."""
    out: list[Violation] = []
    if not isinstance(raw, Mapping):
        return [Violation("MalformedManifest", "$", "manifest must be a JSON object")]
    for key in ("topics", "templates", "generators", "embedding", "entailment", "decomposer"):
        if key not in raw:
            out.append(Violation("MissingField", key, "required field is missing"))

    seen: set[str] = set()
    for i, t in enumerate(raw.get("topics", []) or []):
        path = f"topics[{i}]"
        if not isinstance(t, Mapping) or not isinstance(t.get("id"), str) or not t.get("id"):
            out.append(Violation("MissingField", f"{path}.id", "topic needs a non-empty string id"))
            continue
        if t["id"] in seen:
            out.append(Violation("DuplicateTopicId", f"{path}.id", f"topic id {t['id']!r} repeats"))
        seen.add(t["id"])
        if not isinstance(t.get("label"), str) or not t["label"].strip():
            out.append(Violation("EmptyTopicLabel", f"{path}.label", "topic label must be non-empty"))

    seen = set()
    for i, t in enumerate(raw.get("templates", []) or []):
        path = f"templates[{i}]"
        if not isinstance(t, Mapping) or not t.get("id") or not isinstance(t.get("template"), str):
            out.append(Violation("MissingField", path, "template needs id and template"))
            continue
        if t["id"] in seen:
            out.append(Violation("DuplicateTemplateId", f"{path}.id", f"template id {t['id']!r} repeats"))
        seen.add(t["id"])
        if t["template"].count(PLACEHOLDER) != 1:
            out.append(Violation("MissingPlaceholder", f"{path}.template",
                                 f"must contain {PLACEHOLDER} exactly once"))

    seen = set()
    for i, g in enumerate(raw.get("generators", []) or []):
        path = f"generators[{i}]"
        if not isinstance(g, Mapping) or not g.get("id"):
            out.append(Violation("MissingField", f"{path}.id", "generator needs an id"))
            continue
        if g["id"] in seen or g["id"] == "search":
            out.append(Violation("DuplicateGeneratorId", f"{path}.id", f"generator id {g['id']!r} is taken"))
        seen.add(g["id"])
        _check_backend(g.get("backend"), f"{path}.backend", BackendKind.GENERATION, out)
        for j, s in enumerate(g.get("settings", ["IFT"])):
            if s not in ("IFT", "RAG"):
                out.append(Violation("InvalidSetting", f"{path}.settings[{j}]", "generators run IFT or RAG"))
            if s == "RAG" and not (raw.get("search") or {}).get("pages_dir"):
                out.append(Violation("MissingField", "search.pages_dir", "RAG needs search pages"))

    kinds = {"decomposer": BackendKind.GENERATION, "embedding": BackendKind.EMBEDDING,
             "entailment": BackendKind.ENTAILMENT}
    for key in _BACKEND_KEYS:
        if key in raw:
            _check_backend(raw[key], key, kinds[key], out)

    cp = raw.get("cluster_params", {})
    try:
        ClusterParams.from_dict(cp)
    except (TypeError, ValueError) as exc:
        out.append(Violation("InvalidClusterParams", "cluster_params", str(exc)))

    rar = raw.get("rarefaction", {})
    if int(rar.get("resamples", 100)) < 1:
        out.append(Violation("InvalidRarefactionPlan", "rarefaction.resamples", "must be >= 1"))

    prompt = raw.get("decomposition_prompt", "P3")
    if prompt not in ("P1", "P2", "P3"):
        out.append(Violation("InvalidPrompt", "decomposition_prompt", "must be P1, P2 or P3"))

    floor = (raw.get("search") or {}).get("similarity_floor", SIMILARITY_FLOOR)
    if floor != "auto" and not isinstance(floor, (int, float)):
        out.append(Violation("InvalidSearch", "search.similarity_floor", "must be a number or 'auto'"))

    gen = raw.get("generation", {})
    if not 0 < float(gen.get("top_p", 0.9)) <= 1 or float(gen.get("temperature", 1.0)) < 0 \
            or int(gen.get("max_tokens", 2100)) < 1:
        out.append(Violation("InvalidGeneration", "generation", "top_p in (0,1], temperature >= 0, max_tokens >= 1"))
    return out


def parse_manifest(raw: Mapping[str, Any], base_dir: str | Path = ".") -> RunManifest:
    violations = validate_run_manifest(raw)
    if violations:
        raise ManifestError(violations)
    search = raw.get("search") or {}
    rar = raw.get("rarefaction", {})
    boot = raw.get("bootstrap", {})
    gen = raw.get("generation", {})
    return RunManifest(
        topics=tuple(Topic.from_dict(t) for t in raw["topics"]),
        templates=tuple(PromptTemplate.from_dict(t) for t in raw["templates"]),
        generators=tuple(
            GeneratorConfig(
                g["id"],
                BackendDescriptor.from_dict(g["backend"]),
                tuple(GenerationSetting(s) for s in g.get("settings", ["IFT"])),
            )
            for g in raw["generators"]
        ),
        decomposer=BackendDescriptor.from_dict(raw["decomposer"]),
        embedding=BackendDescriptor.from_dict(raw["embedding"]),
        entailment=BackendDescriptor.from_dict(raw["entailment"]),
        output_dir=raw.get("output_dir", "runs"),
        run_id=raw.get("run_id") or f"run-{config_hash(raw)[:12]}",
        seed=int(raw.get("seed", 0)),
        cluster_params=ClusterParams.from_dict(raw.get("cluster_params", {})),
        rarefaction_resamples=int(rar.get("resamples", 100)),
        bootstrap_resamples=int(boot.get("resamples", 1000)),
        bootstrap_level=float(boot.get("level", 0.95)),
        decomposition_prompt=DecompositionPromptId(raw.get("decomposition_prompt", "P3")),
        top_p=float(gen.get("top_p", 0.9)),
        temperature=float(gen.get("temperature", 1.0)),
        max_tokens=int(gen.get("max_tokens", 2100)),
        search=SearchConfig(
            pages_dir=search.get("pages_dir"),
            include_baseline=bool(search.get("include_baseline", True)),
            similarity_floor=search.get("similarity_floor", SIMILARITY_FLOOR),
            token_budget=int(search.get("token_budget", TOKEN_BUDGET)),
            min_page_chars=int(search.get("min_page_chars", MIN_PAGE_CHARS)),
            min_paragraph_chars=int(search.get("min_paragraph_chars", MIN_PARAGRAPH_CHARS)),
        ),
        references_dir=(raw.get("references") or {}).get("dir"),
        generated_language=(raw.get("references") or {}).get("generated_language", "en"),
        match_top_k=int((raw.get("references") or {}).get("top_k", 6)),
        workers=int(raw.get("workers", 4)),
        base_dir=str(base_dir),
        raw=dict(raw),
    )


def load_manifest(path: str | Path) -> RunManifest:
    """Read and validate a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    text = path.read_text("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError([Violation("MalformedManifest", f"line {exc.lineno} column {exc.colno}", exc.msg)]) from exc
    return parse_manifest(raw, base_dir=path.parent)
