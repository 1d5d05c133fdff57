"""Synthetic claim populations with known class distributions.

These are the ground truth the estimators and the clustering path are checked
against: every claim carries a hidden ``[[k<class>]]`` tag that the mock
backends use as the meaning-class oracle.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .models import Claim, GenerationSetting, ResponseRef

TAG_RE = re.compile(r"\[\[k(\d+)\]\]")

DEFAULT_PHRASINGS = (
    "Source material consistently records fact number {k} about {subject} [[k{k}]].",
    "It is widely documented that {subject} is linked to fact number {k} [[k{k}]].",
    "Historians note fact number {k} when discussing {subject} [[k{k}]].",
    "One recurring point about {subject} is fact number {k} [[k{k}]].",
)


def tag_of(text: str) -> int | None:
    """Hidden class tag of ``text``, or None for tagless text."""
    m = TAG_RE.search(text)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class PopulationSpec:
    """A class distribution family plus sampling settings.

    ``family`` is one of ``uniform``, ``zipf``, ``geometric`` or ``explicit``;
    ``classes`` is S, ``exponent`` the Zipf s, ``ratio`` the geometric r and
    ``probs`` the explicit probability list.
    """

    family: str = "uniform"
    classes: int = 1
    exponent: float = 1.0
    ratio: float = 0.5
    probs: tuple[float, ...] = ()
    n_samples: int = 0
    seed: int = 0
    phrasings: tuple[str, ...] = DEFAULT_PHRASINGS
    subject: str = "the subject"
    class_offset: int = 0

    @classmethod
    def from_dict(cls, data) -> PopulationSpec:
        kw = dict(data)
        if "probs" in kw:
            kw["probs"] = tuple(float(p) for p in kw["probs"])
        if "phrasings" in kw:
            kw["phrasings"] = tuple(kw["phrasings"])
        return cls(**kw)

    def distribution(self) -> np.ndarray:
        if self.family == "uniform":
            p = np.full(self._size(), 1.0 / self._size())
        elif self.family == "zipf":
            p = np.arange(1, self._size() + 1, dtype=float) ** -self.exponent
        elif self.family == "geometric":
            if not 0 < self.ratio < 1:
                raise ValueError("geometric ratio must lie in (0, 1)")
            p = self.ratio ** np.arange(self._size(), dtype=float)
        elif self.family == "explicit":
            p = np.asarray(self.probs, dtype=float)
            if p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("explicit probabilities must be non-negative and sum to 1")
        else:
            raise ValueError(f"unknown family {self.family!r}")
        return p / p.sum()

    def _size(self) -> int:
        if self.classes < 1:
            raise ValueError("a population needs at least one class")
        return self.classes


def render_claim(k: int, variant: int, spec: PopulationSpec) -> str:
    template = spec.phrasings[variant % len(spec.phrasings)]
    return template.format(k=k, subject=spec.subject)


def sample_classes(spec: PopulationSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    p = spec.distribution()
    return rng.choice(p.size, size=n, p=p) + spec.class_offset


def sample_population(spec: PopulationSpec, topic_id: str = "synthetic") -> tuple[list[Claim], np.ndarray]:
    """Draw ``spec.n_samples`` tagged claims i.i.d. and return them with the exact distribution."""
    p = spec.distribution()
    rng = np.random.default_rng(spec.seed)
    ks = sample_classes(spec, spec.n_samples, rng)
    variants = rng.integers(0, len(spec.phrasings), size=spec.n_samples)
    ref = ResponseRef("synthetic", None, GenerationSetting.SEARCH, spec.seed)
    claims = []
    for i, (k, v) in enumerate(zip(ks.tolist(), variants.tolist())):
        claims.append(
            Claim(
                id=Claim.make_id(topic_id, ref, 0, i),
                topic_id=topic_id,
                response_ref=ref,
                chunk_index=0,
                text=render_claim(k, v, spec),
                line_index=i,
            )
        )
    return claims, p


def true_hsd(distribution) -> float:
    """exp of the exact Shannon entropy (nats) of a probability vector."""
    p = np.asarray(distribution, dtype=float)
    p = p[p > 0]
    return float(math.exp(-np.sum(p * np.log(p))))


def true_coverage(distribution, observed) -> float:
    """Total probability of the observed classes (0-based indices)."""
    p = np.asarray(distribution, dtype=float)
    idx = sorted(set(int(i) for i in observed))
    if idx and (idx[0] < 0 or idx[-1] >= p.size):
        raise ValueError("observed classes must lie within the support")
    return float(p[idx].sum()) if idx else 0.0
