"""Hill diversity, sample coverage, coverage-based rarefaction, JSD and bootstrap CIs.

All functions are pure given their inputs and an explicit seed.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .models import AbundanceVector, EmptyAbundance, EpidivError


class TargetUnreachable(EpidivError):
    pass


class DistributionInvalid(EpidivError):
    pass


def _as_counts(v) -> np.ndarray:
    counts = np.asarray(v.counts if isinstance(v, AbundanceVector) else v, dtype=float)
    counts = counts[counts > 0]
    if counts.size == 0:
        raise EmptyAbundance("abundance vector is empty")
    return counts


def _xlogx(p: np.ndarray) -> np.ndarray:
    # 0 * ln 0 is taken as its limit, 0
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def shannon_entropy(v) -> float:
    """Shannon entropy in nats of the relative abundances in ``v``."""
    counts = _as_counts(v)
    p = counts / counts.sum()
    return float(-_xlogx(p).sum())


def hill_diversity(v, order: float = 0.0) -> float:
    r"""Hill diversity with the free parameter ``l`` (``order``).

    .. math::

       D = \left(\sum_i p_i \left(\frac{1}{p_i}\right)^{l}\right)^{1/l}

    ``l = 0`` is the analytic limit ``exp(H)`` (Hill-Shannon diversity),
    ``l = 1`` gives richness and ``l = -1`` the inverse Simpson index. In the
    more common parameterisation this is the Hill number of order ``q = 1 - l``.

    Parameters
    ----------
    v : AbundanceVector or sequence of int
        Class counts. Zero counts are ignored.
    order : float
        The free parameter ``l``.

    Raises
    ------
    EmptyAbundance
        If ``v`` holds no positive counts.
    """
    counts = _as_counts(v)
    p = counts / counts.sum()
    if order == 0:
        return float(math.exp(-_xlogx(p).sum()))
    if not math.isfinite(order):
        raise ValueError("order must be finite")
    # work in log space: (sum p^(1-l))^(1/l) = exp(logsumexp((1-l) ln p) / l)
    logs = (1.0 - order) * np.log(p)
    m = logs.max()
    lse = m + math.log(np.exp(logs - m).sum())
    return float(math.exp(lse / order))


def hsd(v) -> float:
    """Hill-Shannon diversity, ``exp`` of the entropy in nats."""
    return hill_diversity(v, 0.0)


@dataclass(frozen=True)
class CoverageEstimate:
    value: float
    defined: bool


def coverage_from_stats(n: int, f1: int, f2: int) -> CoverageEstimate:
    if n <= 1:
        return CoverageEstimate(0.0, False)
    if f1 == 0:
        return CoverageEstimate(1.0, True)
    bracket = ((n - 1) * f1) / ((n - 1) * f1 + 2 * f2)
    return CoverageEstimate(1.0 - (f1 / n) * bracket, True)


def coverage_estimate(v) -> CoverageEstimate:
    """Sample coverage from singleton and doubleton counts, with a definedness flag."""
    counts = np.asarray(v.counts if isinstance(v, AbundanceVector) else v, dtype=int)
    counts = counts[counts > 0]
    n = int(counts.sum())
    return coverage_from_stats(n, int((counts == 1).sum()), int((counts == 2).sum()))


def coverage(v) -> float:
    """Estimated sample coverage ``1 - f1/n * ((n-1) f1 / ((n-1) f1 + 2 f2))``.

    Returns 0.0 when ``n <= 1``; use :func:`coverage_estimate` to see the flag.
    """
    return coverage_estimate(v).value


@dataclass(frozen=True)
class RarefactionPlan:
    target_coverage: float
    resamples: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_coverage <= 1:
            raise ValueError("target_coverage must lie in (0, 1]")
        if self.resamples < 1:
            raise ValueError("resamples must be >= 1")


def _prefix_stop(labels: np.ndarray, target: float) -> int:
    """Length of the smallest prefix of ``labels`` whose coverage reaches ``target``."""
    counts: dict[int, int] = {}
    f1 = f2 = 0
    for i, lab in enumerate(labels.tolist(), start=1):
        c = counts.get(lab, 0) + 1
        counts[lab] = c
        if c == 1:
            f1 += 1
        elif c == 2:
            f1 -= 1
            f2 += 1
        elif c == 3:
            f2 -= 1
        if coverage_from_stats(i, f1, f2).value >= target:
            return i
    return len(labels)


def rarefy_to_coverage(labels: Sequence, plan: RarefactionPlan) -> list[AbundanceVector]:
    """Downsample a labelled claim sample to a target coverage, ``plan.resamples`` times.

    ``labels`` holds the meaning-class label of each claim. Each repetition
    permutes the claims uniformly, grows a prefix one claim at a time and stops
    at the first prefix whose estimated coverage reaches the target.
    """
    labels = np.asarray(list(labels))
    full = AbundanceVector.from_labels(labels.tolist())
    full_cov = coverage(full) if labels.size else 0.0
    target = plan.target_coverage
    if target > full_cov + 1e-9:
        raise TargetUnreachable(f"target coverage {target:.6f} exceeds sample coverage {full_cov:.6f}")
    if target >= full_cov - 1e-12:
        return [full] * plan.resamples
    _, codes = np.unique(labels, return_inverse=True)
    rng = np.random.default_rng(plan.seed)
    out = []
    for _ in range(plan.resamples):
        perm = codes[rng.permutation(codes.size)]
        stop = _prefix_stop(perm, target)
        counts = np.bincount(perm[:stop])
        out.append(AbundanceVector(tuple(counts[counts > 0])))
    return out


def rarefied_hsd(samples: Sequence[AbundanceVector]) -> tuple[float, float]:
    """Mean and standard deviation of HSD over rarefied samples (sd is 0 for one sample)."""
    if not samples:
        raise ValueError("need at least one rarefied sample")
    values = np.array([hsd(s) for s in samples])
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), sd


def _validate_distribution(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise DistributionInvalid(f"{name} must be a non-empty 1-D distribution")
    if (arr < 0).any() or not np.isfinite(arr).all():
        raise DistributionInvalid(f"{name} has negative or non-finite entries")
    if abs(arr.sum() - 1.0) > 1e-9:
        raise DistributionInvalid(f"{name} sums to {arr.sum()!r}, not 1")
    return arr


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    # q == 0 with p > 0 only happens when a subnormal p underflows in the mixture
    nz = (p > 0) & (q > 0)
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; lies in ``[0, ln 2]``."""
    p = _validate_distribution(p, "p")
    q = _validate_distribution(q, "q")
    if p.shape != q.shape:
        raise DistributionInvalid("p and q must share one class index")
    m = 0.5 * (p + q)
    value = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return float(min(max(value, 0.0), math.log(2)))


def distribution_over(labels: Sequence[int], num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=num_classes).astype(float)
    return counts / counts.sum()


@dataclass(frozen=True)
class JsdResult:
    sources: list[str]
    matrix: list[list[float]]
    cluster_of: dict[str, int]


def jsd_matrix(claims_by_source, embed, entailment, params=None) -> JsdResult:
    """Pairwise JSD between sources after one joint clustering pass.

    ``claims_by_source`` maps a source id (generator) to its ordered claims;
    claims are interleaved round-robin before clustering so no source gets
    to found all early clusters. ``embed`` maps a list of texts to unit
    vectors.
    """
    from .clustering import ClusterParams, cluster_claims, interleave

    params = params or ClusterParams()
    sources = list(claims_by_source)
    if len(sources) < 2 or any(not claims_by_source[s] for s in sources):
        raise ValueError("jsd_matrix needs at least two sources with at least one claim each")
    pooled = interleave([claims_by_source[s] for s in sources])
    vectors = embed([c.text for c in pooled])
    table = cluster_claims(pooled, vectors, entailment, params)
    k = table.num_classes
    dists = [
        distribution_over([table.cluster_of[c.id] for c in claims_by_source[s]], k) for s in sources
    ]
    size = len(sources)
    matrix = [[0.0] * size for _ in range(size)]
    for i in range(size):
        for j in range(i + 1, size):
            matrix[i][j] = matrix[j][i] = jsd(dists[i], dists[j])
    return JsdResult(sources=sources, matrix=matrix, cluster_of=dict(table.cluster_of))


def bootstrap_ci(values: Sequence[float], B: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("values must be non-empty")
    if arr.size == 1 or np.all(arr == arr[0]):
        return float(arr[0]), float(arr[0])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(B, arr.size))
    means = arr[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)
