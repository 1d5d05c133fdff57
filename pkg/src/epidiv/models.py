"""Shared domain types and their JSONL record schemas."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum
from typing import Any

PLACEHOLDER = "{topic}"


class EpidivError(Exception):
    """Base class for all errors raised by this package."""


class MissingPlaceholder(EpidivError):
    pass


class MissingLabel(EpidivError):
    pass


class GenerationSetting(str, Enum):
    IFT = "IFT"
    RAG = "RAG"
    SEARCH = "SEARCH"


def _canonical(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def stable_hash(*parts: Any, length: int = 16) -> str:
    """Hex digest of the canonical JSON encoding of ``parts``."""
    return hashlib.sha256(_canonical(list(parts)).encode("utf-8")).hexdigest()[:length]


class Record:
    """Mixin giving frozen dataclasses a one-line JSON form."""

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _encode(getattr(self, f.name)) for f in fields(self)}  # type: ignore[arg-type]

    def to_json(self) -> str:
        return _canonical(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]):
        raise NotImplementedError

    @classmethod
    def from_json(cls, line: str):
        return cls.from_dict(json.loads(line))


def _encode(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, Record):
        return value.to_dict()
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _encode(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class Topic(Record):
    id: str
    label: str
    country: str | None = None
    language: str | None = None

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            label=data["label"],
            country=data.get("country"),
            language=data.get("language"),
        )


@dataclass(frozen=True)
class PromptTemplate(Record):
    id: str
    template: str

    @classmethod
    def from_dict(cls, data):
        return cls(id=data["id"], template=data["template"])


def render_prompt(template: PromptTemplate, topic: Topic) -> str:
    """Substitute the topic label for the single ``{topic}`` placeholder."""
    occurrences = template.template.count(PLACEHOLDER)
    if occurrences != 1:
        raise MissingPlaceholder(
            f"template {template.id!r} must contain {PLACEHOLDER} exactly once, found {occurrences}"
        )
    if not topic.label.strip():
        raise MissingLabel(f"topic {topic.id!r} has an empty label")
    return template.template.replace(PLACEHOLDER, topic.label)


@dataclass(frozen=True)
class ResponseRef(Record):
    generator_id: str
    prompt_id: str | None
    setting: GenerationSetting
    seed: int

    @classmethod
    def from_dict(cls, data):
        return cls(
            generator_id=data["generator_id"],
            prompt_id=data.get("prompt_id"),
            setting=GenerationSetting(data["setting"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class ResponseRecord(Record):
    generator_id: str
    topic_id: str
    prompt_id: str | None
    setting: GenerationSetting
    text: str
    context_ids: tuple[str, ...] = ()
    seed: int = 0
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        if self.setting is GenerationSetting.SEARCH and self.prompt_id is not None:
            raise ValueError("SEARCH records carry no prompt id")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def ref(self) -> ResponseRef:
        return ResponseRef(self.generator_id, self.prompt_id, self.setting, self.seed)

    @property
    def key(self) -> tuple:
        return (self.generator_id, self.topic_id, self.prompt_id, self.setting.value, self.seed)

    @classmethod
    def from_dict(cls, data):
        return cls(
            generator_id=data["generator_id"],
            topic_id=data["topic_id"],
            prompt_id=data.get("prompt_id"),
            setting=GenerationSetting(data["setting"]),
            text=data["text"],
            context_ids=tuple(data.get("context_ids", ())),
            seed=int(data["seed"]),
            created_at=datetime.fromisoformat(data["created_at"]),
        )


@dataclass(frozen=True)
class Claim(Record):
    id: str
    topic_id: str
    response_ref: ResponseRef
    chunk_index: int
    text: str
    line_index: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("claim text must be non-empty")

    @staticmethod
    def make_id(topic_id: str, ref: ResponseRef, chunk_index: int, line_index: int) -> str:
        return stable_hash(topic_id, ref.to_dict(), chunk_index, line_index)

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            topic_id=data["topic_id"],
            response_ref=ResponseRef.from_dict(data["response_ref"]),
            chunk_index=int(data["chunk_index"]),
            text=data["text"],
            line_index=int(data.get("line_index", 0)),
        )


class EmptyAbundance(EpidivError):
    pass


@dataclass(frozen=True)
class AbundanceVector:
    """Class counts; the only input the diversity statistics need."""

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 1 for c in self.counts):
            raise ValueError("abundance counts must all be >= 1")

    @classmethod
    def from_labels(cls, labels: Iterable[Any]) -> AbundanceVector:
        """Counts per distinct label, in order of first appearance."""
        return cls(tuple(Counter(labels).values()))

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def f1(self) -> int:
        return sum(1 for c in self.counts if c == 1)

    @property
    def f2(self) -> int:
        return sum(1 for c in self.counts if c == 2)

    @property
    def proportions(self) -> list[float]:
        n = self.n
        return [c / n for c in self.counts]


@dataclass(frozen=True)
class MeaningClassTable:
    cluster_of: Mapping[str, int]
    counts: Mapping[int, int]
    n: int

    @classmethod
    def from_assignments(cls, assignments: Iterable[tuple[str, int]]) -> MeaningClassTable:
        cluster_of = dict(assignments)
        counts = Counter(cluster_of.values())
        return cls(cluster_of=cluster_of, counts=dict(sorted(counts.items())), n=len(cluster_of))

    @classmethod
    def empty(cls) -> MeaningClassTable:
        return cls(cluster_of={}, counts={}, n=0)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def abundance(self) -> AbundanceVector:
        return AbundanceVector(tuple(self.counts[k] for k in sorted(self.counts)))

    def members(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for claim_id, cid in self.cluster_of.items():
            out.setdefault(cid, []).append(claim_id)
        return out

    def validate(self) -> None:
        ids = sorted(self.counts)
        if ids != list(range(len(ids))):
            raise ValueError("cluster ids are not dense")
        if sum(self.counts.values()) != self.n or len(self.cluster_of) != self.n:
            raise ValueError("counts do not sum to n")

    def records(self) -> list[dict[str, Any]]:
        return [{"claim_id": k, "cluster_id": v} for k, v in self.cluster_of.items()]


@dataclass(frozen=True)
class DiversityReport(Record):
    generator_id: str
    topic_id: str
    setting: GenerationSetting
    n: int
    num_classes: int
    f1: int
    f2: int
    coverage: float
    hsd: float
    ci_low: float | None = None
    ci_high: float | None = None
    rarefied_to_coverage: float | None = None
    hsd_point: float | None = None
    hsd_sd: float | None = None
    rarefaction_resamples: int | None = None
    rarefaction_seed: int | None = None
    flags: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data):
        kw = {f.name: data.get(f.name) for f in fields(cls) if f.name in data}
        kw["setting"] = GenerationSetting(data["setting"])
        kw["flags"] = tuple(data.get("flags", ()))
        return cls(**kw)


class BackendKind(str, Enum):
    GENERATION = "generation"
    EMBEDDING = "embedding"
    ENTAILMENT = "entailment"


@dataclass(frozen=True)
class RetryPolicy(Record):
    max_attempts: int = 5
    base_backoff_ms: int = 500

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass(frozen=True)
class BackendDescriptor(Record):
    kind: BackendKind
    endpoint_url: str
    model_name: str = ""
    credential_env: str = ""
    max_in_flight: int = 4
    retry: RetryPolicy = RetryPolicy()
    timeout_ms: int = 60_000
    # free-form settings for mock backends (population spec etc.)
    options: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=BackendKind(data["kind"]),
            endpoint_url=data["endpoint_url"],
            model_name=data.get("model_name", ""),
            credential_env=data.get("credential_env", ""),
            max_in_flight=int(data.get("max_in_flight", 4)),
            retry=RetryPolicy.from_dict(data.get("retry", {})),
            timeout_ms=int(data.get("timeout_ms", 60_000)),
            options=dict(data.get("options", {})),
        )


def read_jsonl(path, cls=None) -> list:
    """Load a JSONL file, ignoring a torn trailing line left by an interrupted write."""
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except FileNotFoundError:
        return out
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise
        out.append(cls.from_dict(obj) if cls is not None else obj)
    return out


def repair_jsonl(path) -> None:
    """Truncate a torn final line so that appends start on a fresh line."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return
    if not data or data.endswith(b"\n"):
        return
    cut = data.rfind(b"\n") + 1
    with open(path, "r+b") as fh:
        fh.truncate(cut)


def append_jsonl(path, records: Iterable[Any]) -> int:
    lines = []
    for rec in records:
        lines.append(rec.to_json() if isinstance(rec, Record) else _canonical(rec))
    if not lines:
        return 0
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
        fh.flush()
    return len(lines)


def write_jsonl(path, records: Iterable[Any]) -> int:
    """Atomically replace ``path`` with ``records``."""
    import os

    tmp = f"{path}.tmp"
    lines = [rec.to_json() if isinstance(rec, Record) else _canonical(rec) for rec in records]
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    os.replace(tmp, path)
    return len(lines)


def write_json(path, obj: Any) -> None:
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(_encode(obj), fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
