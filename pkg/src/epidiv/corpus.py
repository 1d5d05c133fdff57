"""Sentence splitting, 3-sentence chunking and claim decomposition."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .backends import GenerationBackend, GenerationRequest
from .models import Claim, ResponseRecord, ResponseRef, Topic

log = logging.getLogger(__name__)

CHUNK_SENTENCES = 3
MAX_DECOMPOSITION_LINES = 200

_BULLET_RE = re.compile(r"^\s*(?:[-*•●▪+]|\d+[.)]|\(\d+\))\s+")
_BOUNDARY_RE = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s)|[。！？]+[」』）]*")


class DecompositionPromptId(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


DEFAULT_PROMPT = DecompositionPromptId.P3


@lru_cache(maxsize=None)
def abbreviations() -> frozenset[str]:
    text = resources.files("epidiv").joinpath("data/abbreviations.txt").read_text("utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


@lru_cache(maxsize=None)
def prompt_text(prompt: DecompositionPromptId | str) -> str:
    name = DecompositionPromptId(prompt).value
    return resources.files("epidiv").joinpath(f"prompts/{name}.txt").read_text("utf-8")


def _split_line(line: str) -> list[str]:
    abbrevs = abbreviations()
    out = []
    start = 0
    for m in _BOUNDARY_RE.finditer(line):
        end = m.end()
        punct = m.group(0)
        if punct[0] == ".":
            token = line[start:end].rsplit(None, 1)[-1].lstrip("\"'(“[").lower()
            if token in abbrevs:
                continue
        if punct[0] in ".!?":
            rest = line[end:].lstrip()
            if rest[:1].islower():
                continue
        piece = line[start:end].strip()
        if piece:
            out.append(piece)
        start = end
    tail = line[start:].strip()
    if tail:
        out.append(tail)
    return out


def split_sentences(text: str) -> list[str]:
    """Rule-based sentence splitter.

    Splits after ``.``, ``!``, ``?`` (and their CJK forms) when followed by
    whitespace and a non-lowercase character, except after known
    abbreviations. Line breaks always end a sentence and every bullet or
    numbered list line is one sentence.
    """
    sentences: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if _BULLET_RE.match(line):
            sentences.append(line)
        else:
            sentences.extend(_split_line(line))
    return sentences


@dataclass(frozen=True)
class Chunk:
    topic_id: str
    response_ref: ResponseRef
    chunk_index: int
    sentences: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.sentences)

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)


def chunk_sentences(topic_id: str, ref: ResponseRef, sentences: list[str]) -> list[Chunk]:
    return [
        Chunk(topic_id, ref, i // CHUNK_SENTENCES, tuple(sentences[i : i + CHUNK_SENTENCES]))
        for i in range(0, len(sentences), CHUNK_SENTENCES)
    ]


def chunk_response(resp: ResponseRecord) -> list[Chunk]:
    """Non-overlapping 3-sentence windows; the last may hold 1 or 2 sentences."""
    return chunk_sentences(resp.topic_id, resp.ref, split_sentences(resp.text))


def render_decomposition_prompt(prompt: DecompositionPromptId | str, issue: str, content: str) -> str:
    # plain replacement: chunk text may contain braces
    return prompt_text(prompt).replace("{issue}", issue).replace("{content}", content)


_MARKER_RE = re.compile(r"^(?:[-*•+]+|\d+[.)]|\(\d+\))\s*")


def parse_decomposition(completion: str) -> tuple[list[str], bool]:
    """Split a decomposition completion into claim lines.

    Returns the lines and whether the completion was degenerate (more than
    ``MAX_DECOMPOSITION_LINES`` lines, in which case it is truncated).
    """
    if completion.strip().upper() == "EMPTY":
        return [], False
    lines = []
    for raw in completion.splitlines():
        line = _MARKER_RE.sub("", raw.strip()).strip()
        if line and line.upper() != "EMPTY":
            lines.append(line)
    degenerate = len(lines) > MAX_DECOMPOSITION_LINES
    return lines[:MAX_DECOMPOSITION_LINES], degenerate


@dataclass(frozen=True)
class DecompositionSettings:
    prompt: DecompositionPromptId = DEFAULT_PROMPT
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 1024


def decompose_chunk(backend: GenerationBackend, chunk: Chunk, topic: Topic,
                    settings: DecompositionSettings = DecompositionSettings(), seed: int = 0) -> list[Claim]:
    if not chunk.text.strip():
        raise ValueError("cannot decompose an empty chunk")
    prompt = render_decomposition_prompt(settings.prompt, topic.label, chunk.text)
    completion = backend.generate(
        GenerationRequest(prompt, top_p=settings.top_p, temperature=settings.temperature,
                          max_tokens=settings.max_tokens, seed=seed)
    )
    lines, degenerate = parse_decomposition(completion)
    if degenerate:
        log.warning("ParseDegenerate: chunk %d of %s truncated to %d lines",
                    chunk.chunk_index, chunk.response_ref, MAX_DECOMPOSITION_LINES)
    return [
        Claim(
            id=Claim.make_id(chunk.topic_id, chunk.response_ref, chunk.chunk_index, i),
            topic_id=chunk.topic_id,
            response_ref=chunk.response_ref,
            chunk_index=chunk.chunk_index,
            text=line,
            line_index=i,
        )
        for i, line in enumerate(lines)
    ]


def decompose_response(backend: GenerationBackend, resp: ResponseRecord, topic: Topic,
                       settings: DecompositionSettings = DecompositionSettings(), seed: int = 0) -> list[Claim]:
    claims: list[Claim] = []
    for chunk in chunk_response(resp):
        claims.extend(decompose_chunk(backend, chunk, topic, settings, seed))
    return claims
