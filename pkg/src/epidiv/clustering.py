"""Online mutual-entailment clustering of claims into meaning classes.

Each claim is compared against its ``N`` most cosine-similar predecessors;
it joins the cluster of the mutually entailing candidate with the highest
product of directional entailment probabilities, or founds a new cluster.
Oversized clusters can then be split with DBSCAN over cosine distance.
"""

from __future__ import annotations

import itertools
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backends import BackendError, EntailmentBackend
from .models import Claim, EpidivError, MeaningClassTable

NOISE = -1


@dataclass(frozen=True)
class ClusterParams:
    max_retrieval: int = 6
    split_threshold: int = 50
    dbscan_eps: float = 0.2
    dbscan_min_pts: int = 3

    def __post_init__(self):
        if self.max_retrieval < 1:
            raise ValueError("max_retrieval must be >= 1")
        if not 0 < self.dbscan_eps < 2:
            raise ValueError("dbscan_eps must lie in (0, 2)")
        if self.dbscan_min_pts < 1:
            raise ValueError("dbscan_min_pts must be >= 1")
        if self.split_threshold < self.dbscan_min_pts:
            raise ValueError("split_threshold must be >= dbscan_min_pts")

    @classmethod
    def from_dict(cls, data) -> ClusterParams:
        return cls(**data)


@dataclass
class ClusterState:
    """Claims seen so far and their cluster labels; enough to resume a run."""

    claim_ids: list[str] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    @property
    def next_cluster_id(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def to_dict(self):
        return {"claim_ids": self.claim_ids, "labels": self.labels}

    @classmethod
    def from_dict(cls, data) -> ClusterState:
        return cls(list(data["claim_ids"]), [int(x) for x in data["labels"]])


class ClusteringInterrupted(EpidivError):
    """A backend failed mid-run; ``state`` holds the progress made so far."""

    def __init__(self, state: ClusterState, cause: BaseException):
        super().__init__(f"clustering interrupted after {len(state.labels)} claims: {cause}")
        self.state = state


def mutual_entailment(entailment: EntailmentBackend, a: str, b: str) -> tuple[bool, float]:
    """Whether ``a`` and ``b`` entail each other (argmax rule) and the product of their probabilities."""
    ab = entailment.entails(a, b)
    ba = entailment.entails(b, a)
    return ab.holds and ba.holds, ab.p_entail * ba.p_entail


def top_n(sims: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest similarities, highest first, ties to the lower index."""
    if sims.size == 0:
        return np.zeros(0, dtype=int)
    n = min(n, sims.size)
    if n < sims.size:
        # partition first, then resolve order (and boundary ties) exactly on the shortlist
        kth = np.partition(-sims, n - 1)[n - 1]
        cand = np.flatnonzero(-sims <= kth)
    else:
        cand = np.arange(sims.size)
    order = np.lexsort((cand, -sims[cand]))
    return cand[order][:n]


@dataclass(frozen=True)
class _Decision:
    label: int
    rank: int | None  # 1-based similarity rank of the chosen candidate
    matched_ranks: tuple[int, ...]


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return embeddings.astype(float, copy=False)
    rows = [e.values if hasattr(e, "values") else e for e in embeddings]
    return np.asarray(rows, dtype=float).reshape(len(rows), -1)


def _judge(entailment: EntailmentBackend, pairs, pool: ThreadPoolExecutor | None):
    if pool is None:
        return [mutual_entailment(entailment, a, b) for a, b in pairs]
    return list(pool.map(lambda ab: mutual_entailment(entailment, *ab), pairs))


def _run(claims: Sequence[Claim], embeddings, entailment: EntailmentBackend, params: ClusterParams,
         state: ClusterState | None):
    """Yield (index, decision) for each claim not already in ``state``."""
    emb = _as_matrix(embeddings)
    if len(claims) != emb.shape[0]:
        raise ValueError("claims and embeddings must be aligned")
    state = state if state is not None else ClusterState()
    start = len(state.labels)
    if [c.id for c in claims[:start]] != state.claim_ids:
        raise ValueError("resume state does not match the claim order")
    labels = list(state.labels)
    texts = [c.text for c in claims]
    workers = getattr(entailment, "max_in_flight", 1)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for j in range(start, len(claims)):
            if j == 0:
                decision = _Decision(0, None, ())
            else:
                sims = emb[:j] @ emb[j]
                cands = top_n(sims, params.max_retrieval)
                try:
                    results = _judge(entailment, [(texts[k], texts[j]) for k in cands], pool)
                except BackendError as exc:
                    raise ClusteringInterrupted(state, exc) from exc
                best = None
                matched = []
                for rank, (k, (ok, score)) in enumerate(zip(cands.tolist(), results), start=1):
                    if not ok:
                        continue
                    matched.append(rank)
                    key = (-score, labels[k])
                    if best is None or key < best[0]:
                        best = (key, rank, labels[k])
                if best is None:
                    decision = _Decision(max(labels) + 1, None, ())
                else:
                    decision = _Decision(best[2], best[1], tuple(matched))
            labels.append(decision.label)
            state.claim_ids.append(claims[j].id)
            state.labels.append(decision.label)
            yield j, decision
    finally:
        if pool is not None:
            pool.shutdown()


def cluster_claims(claims: Sequence[Claim], embeddings, entailment: EntailmentBackend,
                   params: ClusterParams = ClusterParams(), state: ClusterState | None = None) -> MeaningClassTable:
    """Partition ``claims`` (in the given order) into meaning classes.

    ``embeddings`` are unit vectors aligned with ``claims``. Pass a
    :class:`ClusterState` to resume a run interrupted by
    :class:`ClusteringInterrupted`.
    """
    if not claims:
        return MeaningClassTable.empty()
    state = state if state is not None else ClusterState()
    for _ in _run(claims, embeddings, entailment, params, state):
        pass
    return MeaningClassTable.from_assignments(zip(state.claim_ids, state.labels))


def interleave(groups: Sequence[Sequence]) -> list:
    """Round-robin merge: first of each group, then second of each, and so on."""
    out = []
    for row in itertools.zip_longest(*groups):
        out.extend(x for x in row if x is not None)
    return out


def dbscan(vectors: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN over cosine distance of unit vectors; returns labels with -1 for noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within cosine distance ``eps``. Points are visited in index order.
    """
    x = _as_matrix(vectors)
    n = x.shape[0]
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    dist = 1.0 - np.clip(x @ x.T, -1.0, 1.0)
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([nb.size >= min_pts for nb in neighbors])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = list(neighbors[i])
        while queue:
            k = queue.pop(0)
            if labels[k] == NOISE:
                labels[k] = cluster
            if visited[k]:
                continue
            visited[k] = True
            if core[k]:
                queue.extend(neighbors[k])
        cluster += 1
    return labels


@dataclass(frozen=True)
class SplitResult:
    table: MeaningClassTable
    audit: list[dict]


def split_large_clusters(table: MeaningClassTable, embeddings: dict[str, np.ndarray] | Sequence,
                         params: ClusterParams = ClusterParams()) -> SplitResult:
    """Break clusters larger than ``params.split_threshold`` into DBSCAN components.

    ``embeddings`` maps claim id to unit vector, or is a sequence aligned with
    ``table.cluster_of``. DBSCAN noise points become singleton classes. Cluster
    ids are re-densified in order of each class's first claim.
    """
    ids = list(table.cluster_of)
    if not isinstance(embeddings, dict):
        embeddings = dict(zip(ids, _as_matrix(embeddings)))
    members = table.members()
    provisional: dict[str, tuple] = {cid: (table.cluster_of[cid],) for cid in ids}
    audit = []
    for old, claim_ids in sorted(members.items()):
        if len(claim_ids) <= params.split_threshold:
            continue
        labs = dbscan(np.array([embeddings[c] for c in claim_ids]), params.dbscan_eps, params.dbscan_min_pts)
        if (labs != NOISE).all() and len(set(labs.tolist())) == 1:
            continue
        for c, lab, pos in zip(claim_ids, labs.tolist(), range(len(claim_ids))):
            provisional[c] = (old, "noise", pos) if lab == NOISE else (old, lab)
        sizes = Counter(labs.tolist())
        audit.append({
            "cluster_id": old,
            "size": len(claim_ids),
            "components": [sizes[k] for k in sorted(k for k in sizes if k != NOISE)],
            "noise": sizes.get(NOISE, 0),
        })
    dense: dict[tuple, int] = {}
    assignments = []
    for c in ids:
        key = provisional[c]
        if key not in dense:
            dense[key] = len(dense)
        assignments.append((c, dense[key]))
    new = MeaningClassTable.from_assignments(assignments)
    for entry in audit:
        entry["into"] = sorted({dense[provisional[c]] for c in members[entry["cluster_id"]]})
    return SplitResult(new, audit)


@dataclass(frozen=True)
class Calibration:
    histogram: dict[int, int]
    match_histogram: dict[int, int]
    recommended_n: int | None


def calibrate_retrieval_depth(claims: Sequence[Claim], embeddings, entailment: EntailmentBackend,
                              max_n: int = 10, target_mass: float = 0.98) -> Calibration:
    """Similarity ranks at which joining claims find their chosen partner.

    ``histogram`` counts, per rank, the joins whose max-scoring candidate sat
    at that rank; ``match_histogram`` counts every mutually entailing
    candidate per rank. ``recommended_n`` is the smallest depth covering
    ``target_mass`` of the joins.
    """
    if not claims:
        return Calibration({}, {}, None)
    params = ClusterParams(max_retrieval=max_n, split_threshold=max(50, 3))
    hist: Counter = Counter()
    match_hist: Counter = Counter()
    for _, decision in _run(claims, embeddings, entailment, params, None):
        if decision.rank is not None:
            hist[decision.rank] += 1
            match_hist.update(decision.matched_ranks)
    total = sum(hist.values())
    recommended = None
    if total:
        cum = 0
        for rank in range(1, max_n + 1):
            cum += hist.get(rank, 0)
            if cum / total >= target_mass - 1e-12:
                recommended = rank
                break
    return Calibration(dict(sorted(hist.items())), dict(sorted(match_hist.items())), recommended)
