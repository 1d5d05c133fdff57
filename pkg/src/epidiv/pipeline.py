"""Stage runners: each reads its declared checkpoints, skips completed work and appends the rest.

Records are written in a canonical order (cells in manifest order, claims in
response order), so an interrupted-and-resumed run produces the same bytes
as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .backends import BackendError, GenerationRequest, make_backend
from .clustering import ClusteringInterrupted, ClusterState, cluster_claims, interleave, split_large_clusters
from .corpus import DecompositionPromptId, DecompositionSettings, decompose_response
from .manifest import RunManifest, derive_seed
from .models import (
    AbundanceVector,
    BackendDescriptor,
    Claim,
    DiversityReport,
    EpidivError,
    GenerationSetting,
    MeaningClassTable,
    ResponseRecord,
    append_jsonl,
    read_jsonl,
    render_prompt,
    repair_jsonl,
    stable_hash,
    write_json,
    write_jsonl,
)
from .representativeness import ReferenceClaim, match_claims, minimal_representativeness_hsd, MatchRecord
from .retrieval import (
    NoParagraphs,
    Paragraph,
    PageRecord,
    RagContext,
    auto_similarity_floor,
    build_rag_context,
    context_text,
    ingest_pages,
    page_response,
    rag_prompt,
    split_paragraphs,
)
from .stats import RarefactionPlan, coverage_estimate, distribution_over, hsd, jsd, rarefied_hsd, rarefy_to_coverage

log = logging.getLogger(__name__)

RESPONSES = "responses.jsonl"
CLAIMS = "claims.jsonl"
CLUSTERS = "clusters.jsonl"
CLUSTER_META = "cluster_meta.json"
DIVERSITY = "diversity.jsonl"
JSD_MATRIX = "jsd_matrix.json"
JOINT_CLUSTERS = "joint_clusters.jsonl"
FAILURES = "failures.jsonl"
PAGES = "pages.jsonl"
REJECTED_PAGES = "rejected_pages.jsonl"
PARAGRAPHS = "paragraphs.jsonl"
RAG_CONTEXTS = "rag_contexts.jsonl"
DECOMPOSE_PROGRESS = "decompose_progress.jsonl"
MATCHES = "matches.jsonl"
REPRESENTATIVENESS = "representativeness.jsonl"
REPRESENT_PROGRESS = "represent_progress.jsonl"
STATE_DIR = "cluster_state"

# checkpoints each stage consumes; stages refuse to start without them
STAGE_INPUTS = {
    "generate": (),
    "decompose": (RESPONSES,),
    "cluster": (CLAIMS,),
    "diversity": (CLAIMS, CLUSTERS),
    "compare": (CLAIMS,),
    "represent": (CLAIMS, CLUSTERS),
    "report": (DIVERSITY,),
}


class MissingCheckpoint(EpidivError):
    pass


def now() -> datetime:
    """Wall-clock UTC, or the fixed ``SOURCE_DATE_EPOCH`` instant when that is set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return datetime.now(timezone.utc)


class BackendPool:
    """One backend instance per descriptor for the lifetime of a command."""

    def __init__(self, factory: Callable[[BackendDescriptor], object] = make_backend):
        self._factory = factory
        self._cache: dict[str, object] = {}

    def get(self, descriptor: BackendDescriptor):
        key = descriptor.to_json()
        if key not in self._cache:
            self._cache[key] = self._factory(descriptor)
        return self._cache[key]


@dataclass
class StageResult:
    written: int = 0
    skipped: int = 0
    failures: list[dict] = field(default_factory=list)
    summary: list[tuple] = field(default_factory=list)


def require_inputs(run_dir: Path, stage: str) -> None:
    for name in STAGE_INPUTS[stage]:
        if not (run_dir / name).exists():
            raise MissingCheckpoint(f"stage {stage!r} needs checkpoint {name}, which is missing in {run_dir}")
    (run_dir / FAILURES).touch()


def _record_failures(run_dir: Path, failures: list[dict]) -> None:
    if failures:
        append_jsonl(run_dir / FAILURES, failures)


def _prepare(path: Path) -> None:
    repair_jsonl(path)


def _ordered_map(fn, items: list, workers: int) -> Iterable:
    if workers <= 1 or len(items) <= 1:
        yield from map(fn, items)
        return
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        yield from pool.map(fn, items)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)


def cell_id(*parts) -> str:
    return "|".join("" if p is None else str(p.value if hasattr(p, "value") else p) for p in parts)


# generation -----------------------------------------------------------------

@dataclass(frozen=True)
class _GenCell:
    generator_id: str
    topic_id: str
    prompt_id: str
    setting: GenerationSetting

    @property
    def id(self) -> str:
        return cell_id(self.generator_id, self.topic_id, self.prompt_id, self.setting)


def ingest_search(manifest: RunManifest) -> tuple[list[PageRecord], list[PageRecord], list[Paragraph]]:
    kept, rejected, paragraphs = [], [], []
    if not manifest.search.pages_dir:
        return kept, rejected, paragraphs
    root = manifest.resolve(manifest.search.pages_dir)
    for topic in manifest.topics:
        res = ingest_pages(root / topic.id, topic.id, manifest.search.min_page_chars)
        kept.extend(res.kept)
        rejected.extend(res.rejected)
        for page in res.kept:
            paragraphs.extend(split_paragraphs(page, manifest.search.min_paragraph_chars))
    return kept, rejected, paragraphs


def run_generation(manifest: RunManifest, backends: BackendPool, similarity_floor=None) -> StageResult:
    """One response per (generator, topic, template, setting) cell, plus SEARCH page records."""
    run_dir = manifest.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    require_inputs(run_dir, "generate")
    result = StageResult()
    responses_path = run_dir / RESPONSES
    _prepare(responses_path)
    _prepare(run_dir / RAG_CONTEXTS)
    existing = read_jsonl(responses_path, ResponseRecord)
    done = {(r.generator_id, r.topic_id, r.prompt_id, r.setting) for r in existing}

    kept, rejected, paragraphs = ingest_search(manifest)
    if manifest.search.pages_dir:
        write_jsonl(run_dir / PAGES, kept)
        write_jsonl(run_dir / REJECTED_PAGES, rejected)
        write_jsonl(run_dir / PARAGRAPHS, paragraphs)
        if manifest.search.include_baseline:
            # a page's seed is its index, so the cell key must include it
            have = {(r.topic_id, r.seed) for r in existing if r.setting is GenerationSetting.SEARCH}
            new = [r for r in [page_response(p, now()) for p in kept] if (r.topic_id, r.seed) not in have]
            result.written += append_jsonl(responses_path, new)

    cells = [
        _GenCell(g.id, t.id, tpl.id, s)
        for g in manifest.generators
        for t in manifest.topics
        for tpl in manifest.templates
        for s in g.settings
    ]
    todo = [c for c in cells if (c.generator_id, c.topic_id, c.prompt_id, c.setting) not in done]
    result.skipped = len(cells) - len(todo)
    if not todo:
        return result

    topics = {t.id: t for t in manifest.topics}
    templates = {t.id: t for t in manifest.templates}
    generators = {g.id: g for g in manifest.generators}
    by_topic: dict[str, list[Paragraph]] = defaultdict(list)
    for p in paragraphs:
        by_topic[p.page_ref.split("/", 1)[0]].append(p)
    para_by_id = {p.id: p for p in paragraphs}

    rag_cells = [c for c in todo if c.setting is GenerationSetting.RAG]
    para_vectors: dict[str, np.ndarray] = {}
    prompt_vectors: dict[str, np.ndarray] = {}
    floor = manifest.search.similarity_floor if similarity_floor is None else similarity_floor
    if rag_cells:
        embedder = backends.get(manifest.embedding)
        for topic_id in sorted({c.topic_id for c in rag_cells}):
            if by_topic.get(topic_id):
                para_vectors[topic_id] = embedder.embed_all([p.text for p in by_topic[topic_id]])
        keys = sorted({(c.topic_id, c.prompt_id) for c in rag_cells})
        texts = [render_prompt(templates[p], topics[t]) for t, p in keys]
        for key, vec in zip(keys, embedder.embed_all(texts)):
            prompt_vectors[key] = vec
        if floor == "auto":
            floor = auto_similarity_floor(
                np.array([prompt_vectors[k] for k in keys]),
                np.vstack([para_vectors[t] for t in sorted(para_vectors)]) if para_vectors else np.zeros((0, 1)),
            )
            log.info("similarity floor (auto) = %.4f", floor)
    floor = float(floor)

    def job(cell: _GenCell):
        seed = derive_seed(manifest.seed, "generate", cell.id)
        prompt = render_prompt(templates[cell.prompt_id], topics[cell.topic_id])
        ctx = None
        try:
            if cell.setting is GenerationSetting.RAG:
                ctx = build_rag_context(
                    prompt_vectors[(cell.topic_id, cell.prompt_id)],
                    by_topic.get(cell.topic_id, []),
                    para_vectors.get(cell.topic_id, np.zeros((0, 1))),
                    seed,
                    generator_id=cell.generator_id, topic_id=cell.topic_id, prompt_id=cell.prompt_id,
                    floor=floor, budget=manifest.search.token_budget,
                )
                prompt = rag_prompt(prompt, context_text(ctx, para_by_id))
            backend = backends.get(generators[cell.generator_id].backend)
            text = backend.generate(GenerationRequest(prompt, manifest.top_p, manifest.temperature,
                                                      manifest.max_tokens, seed))
        except (BackendError, NoParagraphs) as exc:
            return cell, None, None, exc
        rec = ResponseRecord(cell.generator_id, cell.topic_id, cell.prompt_id, cell.setting, text,
                             ctx.paragraph_ids if ctx else (), seed, now())
        return cell, rec, ctx, None

    for cell, rec, ctx, exc in _ordered_map(job, todo, manifest.workers):
        if exc is not None:
            failure = {"stage": "generate", "cell": cell.id, "error": type(exc).__name__, "message": str(exc)}
            result.failures.append(failure)
            _record_failures(run_dir, [failure])
            continue
        if ctx is not None:
            append_jsonl(run_dir / RAG_CONTEXTS, [ctx])
        result.written += append_jsonl(responses_path, [rec])
    return result


# decomposition ----------------------------------------------------------------

def _response_key(r: ResponseRecord) -> str:
    return cell_id(r.generator_id, r.topic_id, r.prompt_id, r.setting, r.seed)


def _valid_progress(path: Path, valid: Callable[[dict], bool], key: str) -> set[str]:
    """Keys of progress entries whose data is intact; stale entries are dropped from the file."""
    entries = read_jsonl(path)
    kept = [p for p in entries if valid(p)]
    if len(kept) != len(entries):
        write_jsonl(path, kept)
    return {p[key] for p in kept}


def _claim_response_key(c: Claim) -> str:
    ref = c.response_ref
    return cell_id(ref.generator_id, c.topic_id, ref.prompt_id, ref.setting, ref.seed)


def run_decomposition(manifest: RunManifest, backends: BackendPool,
                      prompt: DecompositionPromptId | None = None) -> StageResult:
    """Chunk and decompose every response not yet marked done in the progress log."""
    run_dir = manifest.run_dir
    require_inputs(run_dir, "decompose")
    result = StageResult()
    claims_path = run_dir / CLAIMS
    progress_path = run_dir / DECOMPOSE_PROGRESS
    _prepare(claims_path)
    _prepare(progress_path)
    responses = read_jsonl(run_dir / RESPONSES, ResponseRecord)
    stored = read_jsonl(claims_path, Claim)
    have = {c.id for c in stored}
    per_response = Counter(_claim_response_key(c) for c in stored)
    # a progress entry only counts when every claim it promises survived on disk
    done = _valid_progress(progress_path, lambda p: per_response[p["response"]] == p["claims"], "response")
    todo = [r for r in responses if _response_key(r) not in done]
    result.skipped = len(responses) - len(todo)
    settings = DecompositionSettings(prompt=prompt or manifest.decomposition_prompt)
    decomposer = backends.get(manifest.decomposer)
    topics = {t.id: t for t in manifest.topics}

    def job(resp: ResponseRecord):
        seed = derive_seed(manifest.seed, "decompose", _response_key(resp))
        try:
            return resp, decompose_response(decomposer, resp, topics[resp.topic_id], settings, seed), None
        except BackendError as exc:
            return resp, None, exc

    for resp, claims, exc in _ordered_map(job, todo, manifest.workers):
        key = _response_key(resp)
        if exc is not None:
            failure = {"stage": "decompose", "cell": key, "error": type(exc).__name__, "message": str(exc)}
            result.failures.append(failure)
            _record_failures(run_dir, [failure])
            continue
        fresh = [c for c in claims if c.id not in have]
        result.written += append_jsonl(claims_path, fresh)
        have.update(c.id for c in fresh)
        append_jsonl(progress_path, [{"response": key, "claims": len(claims)}])
    return result


# clustering ----------------------------------------------------------------------

def claim_cell(c: Claim) -> str:
    return cell_id(c.topic_id, c.response_ref.generator_id, c.response_ref.setting)


def group_claims(claims: list[Claim]) -> dict[str, list[Claim]]:
    cells: dict[str, list[Claim]] = {}
    for c in claims:
        cells.setdefault(claim_cell(c), []).append(c)
    return cells


def _read_meta(run_dir: Path) -> dict:
    path = run_dir / CLUSTER_META
    if path.exists():
        return json.loads(path.read_text("utf-8"))
    return {}


def run_clustering(manifest: RunManifest, backends: BackendPool) -> StageResult:
    """Cluster each (topic, generator, setting) cell and split oversized clusters."""
    run_dir = manifest.run_dir
    require_inputs(run_dir, "cluster")
    result = StageResult()
    clusters_path = run_dir / CLUSTERS
    _prepare(clusters_path)
    claims = read_jsonl(run_dir / CLAIMS, Claim)
    cells = group_claims(claims)
    meta = _read_meta(run_dir)
    params = manifest.cluster_params
    meta.setdefault("params", dataclasses.asdict(params))
    meta.setdefault("run_id", manifest.run_id)
    meta.setdefault("config_hash", manifest.config_hash)
    meta.setdefault("cells", {})
    have = {r["claim_id"] for r in read_jsonl(clusters_path)}
    rows_per_cell = Counter(claim_cell(c) for c in claims if c.id in have)
    todo = [cid for cid in cells if meta["cells"].get(cid, {}).get("n") != rows_per_cell[cid]]
    result.skipped = len(cells) - len(todo)
    embedder = backends.get(manifest.embedding)
    entailment = backends.get(manifest.entailment)
    state_dir = run_dir / STATE_DIR

    def job(cid: str):
        members = cells[cid]
        state_path = state_dir / f"{stable_hash(cid)}.json"
        state = None
        if state_path.exists():
            state = ClusterState.from_dict(json.loads(state_path.read_text("utf-8")))
        try:
            vectors = embedder.embed_all([c.text for c in members])
            table = cluster_claims(members, vectors, entailment, params, state)
        except ClusteringInterrupted as exc:
            state_dir.mkdir(exist_ok=True)
            write_json(state_path, exc.state.to_dict())
            return cid, None, exc, state_path
        except BackendError as exc:
            return cid, None, exc, state_path
        split = split_large_clusters(table, vectors, params)
        return cid, split, None, state_path

    for cid, split, exc, state_path in _ordered_map(job, todo, manifest.workers):
        if exc is not None:
            failure = {"stage": "cluster", "cell": cid, "error": type(exc).__name__, "message": str(exc)}
            result.failures.append(failure)
            _record_failures(run_dir, [failure])
            continue
        rows = [r for r in split.table.records() if r["claim_id"] not in have]
        result.written += append_jsonl(clusters_path, rows)
        have.update(r["claim_id"] for r in rows)
        meta["cells"][cid] = {
            "n": split.table.n,
            "counts": [split.table.counts[k] for k in sorted(split.table.counts)],
            "splits": split.audit,
        }
        write_json(run_dir / CLUSTER_META, meta)
        if state_path.exists():
            state_path.unlink()
    if not (run_dir / CLUSTER_META).exists():
        write_json(run_dir / CLUSTER_META, meta)
    return result


def load_tables(run_dir: Path) -> tuple[list[Claim], dict[str, int]]:
    claims = read_jsonl(run_dir / CLAIMS, Claim)
    cluster_of = {r["claim_id"]: int(r["cluster_id"]) for r in read_jsonl(run_dir / CLUSTERS)}
    return claims, cluster_of


# diversity --------------------------------------------------------------------------

def _cell_parts(cid: str) -> tuple[str, str, GenerationSetting]:
    topic_id, generator_id, setting = cid.split("|")
    return topic_id, generator_id, GenerationSetting(setting)


def run_diversity(manifest: RunManifest) -> StageResult:
    """Coverage-rarefied HSD per cell, rarefying every topic to its lowest LLM coverage."""
    run_dir = manifest.run_dir
    require_inputs(run_dir, "diversity")
    result = StageResult()
    claims, cluster_of = load_tables(run_dir)
    cells = group_claims([c for c in claims if c.id in cluster_of])
    by_topic: dict[str, list[str]] = {}
    for cid in cells:
        by_topic.setdefault(_cell_parts(cid)[0], []).append(cid)

    reports = []
    for topic_id, cids in by_topic.items():
        labels = {cid: [cluster_of[c.id] for c in cells[cid]] for cid in cids}
        cov = {cid: coverage_estimate(AbundanceVector.from_labels(labels[cid])) for cid in cids}
        llm = [cov[cid].value for cid in cids
               if _cell_parts(cid)[2] is not GenerationSetting.SEARCH and cov[cid].defined]
        target = min(llm) if llm else None
        for cid in cids:
            _, generator_id, setting = _cell_parts(cid)
            vec = AbundanceVector.from_labels(labels[cid])
            point = hsd(vec)
            flags = [] if cov[cid].defined else ["CoverageUndefined"]
            rarefy = target is not None and target > 0 and cov[cid].defined
            if setting is GenerationSetting.SEARCH and rarefy and cov[cid].value <= target:
                rarefy = False
                flags.append("RarefactionExempt")
            mean, sd, seed, resamples, to = point, 0.0, None, None, None
            if rarefy:
                seed = derive_seed(manifest.seed, "rarefy", cid)
                resamples = manifest.rarefaction_resamples
                plan = RarefactionPlan(min(target, cov[cid].value), resamples, seed)
                mean, sd = rarefied_hsd(rarefy_to_coverage(labels[cid], plan))
                to = plan.target_coverage
            reports.append(DiversityReport(
                generator_id, topic_id, setting,
                n=vec.n, num_classes=vec.num_classes, f1=vec.f1, f2=vec.f2,
                coverage=cov[cid].value, hsd=mean, rarefied_to_coverage=to,
                hsd_point=point, hsd_sd=sd, rarefaction_resamples=resamples, rarefaction_seed=seed,
                flags=tuple(flags),
            ))
            result.summary.append((generator_id, setting.value, topic_id, vec.n, round(cov[cid].value, 4),
                                   round(mean, 4)))
    result.written = write_jsonl(run_dir / DIVERSITY, reports)
    return result


# compare (JSD) ------------------------------------------------------------------------

def source_id(generator_id: str, setting: GenerationSetting | str) -> str:
    return f"{generator_id}:{setting.value if hasattr(setting, 'value') else setting}"


def run_compare(manifest: RunManifest, backends: BackendPool) -> StageResult:
    """Joint clustering per topic and pairwise JSD between sources (generator:setting)."""
    run_dir = manifest.run_dir
    require_inputs(run_dir, "compare")
    result = StageResult()
    joint_path = run_dir / JOINT_CLUSTERS
    _prepare(joint_path)
    claims = read_jsonl(run_dir / CLAIMS, Claim)
    stored: dict[str, dict[str, int]] = defaultdict(dict)
    for r in read_jsonl(joint_path):
        stored[r["topic_id"]][r["claim_id"]] = int(r["cluster_id"])

    topics: dict[str, dict[str, list[Claim]]] = {}
    for c in claims:
        src = source_id(c.response_ref.generator_id, c.response_ref.setting)
        topics.setdefault(c.topic_id, {}).setdefault(src, []).append(c)

    embedder = backends.get(manifest.embedding)
    entailment = backends.get(manifest.entailment)
    all_sources: list[str] = []
    per_topic = {}
    for topic_id, by_source in topics.items():
        sources = list(by_source)
        for s in sources:
            if s not in all_sources:
                all_sources.append(s)
        if len(sources) < 2:
            continue
        pooled = interleave([by_source[s] for s in sources])
        if topic_id in stored and all(c.id in stored[topic_id] for c in pooled):
            cluster_of = stored[topic_id]
            result.skipped += 1
        else:
            vectors = embedder.embed_all([c.text for c in pooled])
            try:
                table = cluster_claims(pooled, vectors, entailment, manifest.cluster_params)
            except (ClusteringInterrupted, BackendError) as exc:
                failure = {"stage": "compare", "cell": topic_id, "error": type(exc).__name__, "message": str(exc)}
                result.failures.append(failure)
                _record_failures(run_dir, [failure])
                continue
            cluster_of = dict(table.cluster_of)
            rows = [{"topic_id": topic_id, "claim_id": c.id, "cluster_id": cluster_of[c.id]}
                    for c in pooled if c.id not in stored[topic_id]]
            result.written += append_jsonl(joint_path, rows)
        k = max(cluster_of.values()) + 1
        dists = [distribution_over([cluster_of[c.id] for c in by_source[s]], k) for s in sources]
        matrix = [[0.0 if i == j else jsd(dists[i], dists[j]) for j in range(len(sources))]
                  for i in range(len(sources))]
        per_topic[topic_id] = {"sources": sources, "matrix": matrix}

    size = len(all_sources)
    sums = np.zeros((size, size))
    counts = np.zeros((size, size))
    for entry in per_topic.values():
        idx = [all_sources.index(s) for s in entry["sources"]]
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                sums[i, j] += entry["matrix"][a][b]
                counts[i, j] += 1
    mean = [[(float(sums[i, j] / counts[i, j]) if counts[i, j] else (0.0 if i == j else None))
             for j in range(size)] for i in range(size)]
    write_json(run_dir / JSD_MATRIX, {
        "run_id": manifest.run_id,
        "config_hash": manifest.config_hash,
        "sources": all_sources,
        "matrix": mean,
        "per_topic": per_topic,
    })
    return result


# representativeness ------------------------------------------------------------------

def load_references(root: Path, topic_id: str) -> dict[str, list[ReferenceClaim]]:
    out = {}
    topic_dir = root / topic_id
    if not topic_dir.is_dir():
        return out
    for path in sorted(topic_dir.glob("*.jsonl")):
        refs = read_jsonl(path, ReferenceClaim)
        if refs:
            out[path.stem] = refs
    return out


def run_represent(manifest: RunManifest, backends: BackendPool) -> StageResult:
    """Match reference claims to IFT claims and report HSD over the matched subset per language."""
    run_dir = manifest.run_dir
    require_inputs(run_dir, "represent")
    result = StageResult()
    if not manifest.references_dir:
        raise MissingCheckpoint("manifest has no references.dir; nothing to match against")
    root = manifest.resolve(manifest.references_dir)
    matches_path = run_dir / MATCHES
    progress_path = run_dir / REPRESENT_PROGRESS
    _prepare(matches_path)
    _prepare(progress_path)
    claims, cluster_of = load_tables(run_dir)
    matches = read_jsonl(matches_path, MatchRecord)
    topic_of = {c.id: c.topic_id for c in claims}
    per_topic = Counter(topic_of.get(m.generated_claim_id) for m in matches)
    done = _valid_progress(progress_path, lambda p: per_topic[p["topic_id"]] == p["matches"], "topic_id")
    seen = {(m.reference_claim_id, m.generated_claim_id) for m in matches}
    embedder = backends.get(manifest.embedding)
    entailment = backends.get(manifest.entailment)
    multilingual = bool(getattr(embedder, "multilingual", manifest.embedding.options.get("multilingual", False)))

    refs_by_topic = {}
    for topic in manifest.topics:
        refs = load_references(root, topic.id)
        if not refs:
            continue
        refs_by_topic[topic.id] = refs
        if topic.id in done:
            result.skipped += 1
            continue
        generated = [c for c in claims if c.topic_id == topic.id and c.response_ref.setting is GenerationSetting.IFT]
        references = [r for lang in sorted(refs) for r in refs[lang]]
        if generated:
            try:
                new = match_claims(
                    references, generated,
                    embedder.embed_all([r.text for r in references]),
                    embedder.embed_all([c.text for c in generated]),
                    entailment, manifest.match_top_k,
                    multilingual=multilingual, generated_language=manifest.generated_language,
                )
            except BackendError as exc:
                failure = {"stage": "represent", "cell": topic.id, "error": type(exc).__name__, "message": str(exc)}
                result.failures.append(failure)
                _record_failures(run_dir, [failure])
                continue
        else:
            new = []
        fresh = [m for m in new if (m.reference_claim_id, m.generated_claim_id) not in seen]
        result.written += append_jsonl(matches_path, fresh)
        matches.extend(fresh)
        append_jsonl(progress_path, [{"topic_id": topic.id, "matches": len(new)}])

    cells = group_claims([c for c in claims if c.id in cluster_of])
    rows = []
    for topic_id, refs in refs_by_topic.items():
        for cid, members in cells.items():
            t, generator_id, setting = _cell_parts(cid)
            if t != topic_id or setting is not GenerationSetting.IFT:
                continue
            table = MeaningClassTable.from_assignments((c.id, cluster_of[c.id]) for c in members)
            for language in sorted(refs):
                report = minimal_representativeness_hsd(
                    members, table, matches, generator_id=generator_id, topic_id=topic_id, setting=setting,
                    reference_ids={r.id for r in refs[language]},
                )
                rows.append({**report.to_dict(), "language": language,
                             "country": manifest.topic(topic_id).country,
                             "entailment_backend": manifest.entailment.model_name or manifest.entailment.endpoint_url})
    write_jsonl(run_dir / REPRESENTATIVENESS, rows)
    return result
