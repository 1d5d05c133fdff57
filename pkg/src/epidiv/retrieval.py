"""Search-baseline ingestion and RAG context construction."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from urllib.parse import urlparse

import numpy as np

from .models import EpidivError, GenerationSetting, Record, ResponseRecord

log = logging.getLogger(__name__)

MIN_PAGE_CHARS = 1000
MIN_PARAGRAPH_CHARS = 100
TOKEN_BUDGET = 1000
SIMILARITY_FLOOR = 0.35
SEARCH_GENERATOR_ID = "search"
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class NoParagraphs(EpidivError):
    pass


class MetadataMissing(EpidivError):
    pass


@lru_cache(maxsize=None)
def social_domains() -> frozenset[str]:
    text = resources.files("epidiv").joinpath("data/social_domains.txt").read_text("utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def estimate_tokens(text: str) -> int:
    """Token-count proxy: ``ceil(len(text) / 4)``."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class PageRecord(Record):
    topic_id: str
    url: str
    content_type: str
    text: str
    char_count: int
    page_index: int = 0
    rejected: str | None = None

    @property
    def id(self) -> str:
        return f"{self.topic_id}/{self.page_index}"

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Paragraph(Record):
    id: str
    page_ref: str
    index: int
    text: str

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class RagContext(Record):
    generator_id: str
    topic_id: str
    prompt_id: str
    paragraph_ids: tuple[str, ...]
    token_estimate: int
    truncated_chars: int | None = None

    @classmethod
    def from_dict(cls, data):
        return cls(**{**data, "paragraph_ids": tuple(data["paragraph_ids"])})


def _domain_blocked(url: str, blocklist) -> bool:
    host = (urlparse(url).hostname or "").lower()
    return any(host == d or host.endswith("." + d) for d in blocklist)


def rejection_reason(url: str, content_type: str, text: str, min_chars: int = MIN_PAGE_CHARS) -> str | None:
    if "pdf" in content_type.lower() or urlparse(url).path.lower().endswith(".pdf"):
        return "Pdf"
    if _domain_blocked(url, social_domains()):
        return "SocialMedia"
    if len(text) < min_chars:
        return "TooShort"
    return None


@dataclass(frozen=True)
class IngestResult:
    kept: list[PageRecord]
    rejected: list[PageRecord]


def _page_index(path: Path) -> tuple:
    return (0, int(path.stem)) if path.stem.isdigit() else (1, path.stem)


def ingest_pages(directory, topic_id: str, min_chars: int = MIN_PAGE_CHARS) -> IngestResult:
    """Read ``<n>.txt`` pages with ``<n>.meta.json`` sidecars and apply the page filters.

    Pages are rejected when they are PDFs, come from a social-media domain, or
    hold fewer than ``min_chars`` characters. Files without metadata are
    skipped with a logged ``MetadataMissing``.
    """
    kept, rejected = [], []
    directory = Path(directory)
    if not directory.is_dir():
        return IngestResult(kept, rejected)
    for i, path in enumerate(sorted(directory.glob("*.txt"), key=_page_index)):
        meta_path = path.with_name(path.stem + ".meta.json")
        try:
            meta = json.loads(meta_path.read_text("utf-8"))
            url, content_type = meta["url"], meta["content_type"]
        except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
            log.warning("MetadataMissing: %s (%s)", path, exc)
            continue
        text = path.read_text("utf-8", errors="replace")
        index = int(path.stem) if path.stem.isdigit() else i
        reason = rejection_reason(url, content_type, text, min_chars)
        page = PageRecord(topic_id, url, content_type, text, len(text), index, reason)
        (rejected if reason else kept).append(page)
    return IngestResult(kept, rejected)


def split_paragraphs(page: PageRecord, min_chars: int = MIN_PARAGRAPH_CHARS) -> list[Paragraph]:
    """Blank-line separated blocks of at least ``min_chars`` characters."""
    blocks = (b.strip() for b in re.split(r"\n[ \t]*\n", page.text))
    kept = [b for b in blocks if len(b) >= min_chars]
    return [Paragraph(f"{page.id}#{i}", page.id, i, text) for i, text in enumerate(kept)]


def page_response(page: PageRecord, created_at) -> ResponseRecord:
    """A search page expressed as a SEARCH-setting response so it is decomposed like any other."""
    return ResponseRecord(
        generator_id=SEARCH_GENERATOR_ID,
        topic_id=page.topic_id,
        prompt_id=None,
        setting=GenerationSetting.SEARCH,
        text=page.text,
        context_ids=(),
        seed=page.page_index,
        created_at=created_at,
    )


def rank_order(sims: np.ndarray, floor: float, seed: int) -> list[int]:
    """Similarity ranking with every above-floor entry shuffled ahead of the below-floor tail."""
    ranked = np.lexsort((np.arange(sims.size), -sims)).tolist()
    above = [i for i in ranked if sims[i] > floor]
    below = [i for i in ranked if sims[i] <= floor]
    rng = np.random.default_rng(seed)
    above = [above[k] for k in rng.permutation(len(above))]
    return above + below


def build_rag_context(prompt_vector: np.ndarray, paragraphs: list[Paragraph], paragraph_vectors: np.ndarray,
                      seed: int, *, generator_id: str = "", topic_id: str = "", prompt_id: str = "",
                      floor: float = SIMILARITY_FLOOR, budget: int = TOKEN_BUDGET,
                      estimator=estimate_tokens) -> RagContext:
    """Pick context paragraphs for one prompt within a token budget.

    Paragraphs are ranked by cosine similarity to the prompt; those above
    ``floor`` are shuffled with ``seed`` and placed ahead of the rest. Then
    paragraphs are appended in that order whenever they still fit the budget.
    If none fits, the first paragraph is truncated to the budget.
    """
    if not paragraphs:
        raise NoParagraphs(f"no paragraphs available for topic {topic_id!r}")
    sims = np.asarray(paragraph_vectors, dtype=float) @ np.asarray(prompt_vector, dtype=float)
    order = rank_order(sims, floor, seed)
    chosen, used = [], 0
    for i in order:
        cost = estimator(paragraphs[i].text)
        if used + cost <= budget:
            chosen.append(paragraphs[i].id)
            used += cost
    if chosen:
        return RagContext(generator_id, topic_id, prompt_id, tuple(chosen), used)
    top = paragraphs[order[0]]
    chars = budget * 4
    while estimator(top.text[:chars]) > budget:
        chars -= 1
    return RagContext(generator_id, topic_id, prompt_id, (top.id,), estimator(top.text[:chars]), chars)


def context_text(ctx: RagContext, paragraphs_by_id: dict[str, Paragraph]) -> str:
    parts = [paragraphs_by_id[pid].text for pid in ctx.paragraph_ids]
    if ctx.truncated_chars is not None:
        parts = [parts[0][: ctx.truncated_chars]]
    return "\n\n".join(parts)


def rag_prompt(prompt: str, context: str) -> str:
    return f"Use the following context where it is relevant.\n\n{context}\n\nTask: {prompt}"


def auto_similarity_floor(prompt_vectors: np.ndarray, paragraph_vectors: np.ndarray) -> float:
    """Mean cosine similarity over all (prompt, paragraph) pairs."""
    if len(prompt_vectors) == 0 or len(paragraph_vectors) == 0:
        return SIMILARITY_FLOOR
    return float((np.asarray(prompt_vectors) @ np.asarray(paragraph_vectors).T).mean())


def search_baseline_claims(pages: list[PageRecord], topic, decomposer, settings=None, seed: int = 0):
    """Decompose kept search pages exactly like responses; claims carry ``setting=SEARCH``."""
    from .corpus import DecompositionSettings, decompose_response

    if not pages:
        log.warning("no kept search pages for topic %s; search baseline is empty", topic.id)
        return []
    settings = settings or DecompositionSettings()
    claims = []
    for page in pages:
        resp = page_response(page, created_at=_EPOCH)
        claims.extend(decompose_response(decomposer, resp, topic, settings, seed))
    return claims
