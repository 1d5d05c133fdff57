"""Minimal representativeness: HSD restricted to generated claims matched to a reference corpus."""

from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .clustering import mutual_entailment, top_n
from .models import (
    Claim,
    DiversityReport,
    EpidivError,
    GenerationSetting,
    MeaningClassTable,
    Record,
)
from .stats import coverage_estimate, hsd


class MonolingualBackend(EpidivError):
    pass


@dataclass(frozen=True)
class ReferenceClaim(Record):
    id: str
    topic_id: str
    language: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("reference claim text must be non-empty")

    @classmethod
    def from_dict(cls, data):
        return cls(id=data["id"], topic_id=data["topic_id"], language=data["language"], text=data["text"])


@dataclass(frozen=True)
class MatchRecord(Record):
    reference_claim_id: str
    generated_claim_id: str
    cosine: float
    mutual_entailment: bool = True
    rank: int = 1

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def match_claims(references: Sequence[ReferenceClaim], generated: Sequence[Claim], reference_vectors,
                 generated_vectors, entailment, top_k: int = 6, *, multilingual: bool = True,
                 generated_language: str = "en") -> list[MatchRecord]:
    """Mutually entailing (reference, generated) pairs among each reference's top-k neighbours.

    RAG-setting claims are dropped from ``generated`` (and their vectors with
    them). Matching references in another language than ``generated_language``
    requires a multilingual embedding backend.
    """
    if not references or not generated:
        raise ValueError("match_claims needs non-empty reference and generated claim sets")
    if not multilingual and any(r.language != generated_language for r in references):
        raise MonolingualBackend("cross-lingual matching needs a multilingual embedding backend")
    keep = [i for i, c in enumerate(generated) if c.response_ref.setting is not GenerationSetting.RAG]
    gen = [generated[i] for i in keep]
    gvec = np.asarray(generated_vectors, dtype=float)[keep]
    rvec = np.asarray(reference_vectors, dtype=float)
    out = []
    for r, rv in zip(references, rvec):
        if not gen:
            break
        sims = gvec @ rv
        for rank, k in enumerate(top_n(sims, top_k).tolist(), start=1):
            ok, _ = mutual_entailment(entailment, r.text, gen[k].text)
            if ok:
                out.append(MatchRecord(r.id, gen[k].id, float(sims[k]), True, rank))
    out.sort(key=lambda m: (m.reference_claim_id, m.generated_claim_id))
    return out


def minimal_representativeness_hsd(claims: Sequence[Claim], table: MeaningClassTable,
                                   matches: Sequence[MatchRecord], *, generator_id: str = "",
                                   topic_id: str = "", setting: GenerationSetting = GenerationSetting.IFT,
                                   reference_ids: set[str] | None = None) -> DiversityReport:
    """HSD over the generated claims that matched at least one reference claim.

    ``reference_ids`` restricts the matches to one language's references.
    A generated claim matched several times counts once.
    """
    matched = {
        m.generated_claim_id
        for m in matches
        if m.mutual_entailment and (reference_ids is None or m.reference_claim_id in reference_ids)
    }
    labels = [table.cluster_of[c.id] for c in claims if c.id in matched and c.id in table.cluster_of]
    if not labels:
        return DiversityReport(generator_id, topic_id, setting, 0, 0, 0, 0, 0.0, 0.0, flags=("Empty",))
    counts = Counter(labels)
    vec = list(counts.values())
    cov = coverage_estimate(vec)
    value = hsd(vec)
    return DiversityReport(
        generator_id, topic_id, setting,
        n=len(labels),
        num_classes=len(counts),
        f1=sum(1 for c in vec if c == 1),
        f2=sum(1 for c in vec if c == 2),
        coverage=cov.value,
        hsd=value,
        hsd_point=value,
        flags=() if cov.defined else ("CoverageUndefined",),
    )
