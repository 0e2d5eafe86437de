"""Server-side machinery: clustering of uploaded models, assignment
matrices, damped aggregation, round-to-round transition tracking, and the
K-selection heuristic.

Client uploads are clustered each round with k-means++ seeding followed by
Lloyd iterations. The resulting partition is encoded twice:

* P (N x K), entries 1/|C_k| on membership, so every column sums to 1 and
  right-multiplying the upload matrix by P averages each cluster;
* J (K x N), 0/1 broadcast matrix with J @ P = I_K.

New cluster labels are aligned to the previous round's by greedy
maximum-overlap matching, so a stable partition keeps stable indices and
the transition matrix converges to the identity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class Assignment:
    """A disjoint clustering of the N clients and its matrix forms."""

    clusters: list[list[int]]
    P: np.ndarray
    J: np.ndarray

    @property
    def num_clients(self) -> int:
        return self.P.shape[0]

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    def labels(self) -> np.ndarray:
        out = np.empty(self.num_clients, dtype=np.int64)
        for k, members in enumerate(self.clusters):
            out[members] = k
        return out


def build_assignment(clusters: list[list[int]], num_clients: int) -> Assignment:
    """Construct P and J from membership lists, validating the partition."""
    seen: set[int] = set()
    for members in clusters:
        if not members:
            raise ConfigError("empty cluster in assignment")
        seen.update(members)
    if seen != set(range(num_clients)) or sum(len(c) for c in clusters) != num_clients:
        raise ConfigError("clusters must partition the client set exactly")

    k = len(clusters)
    p = np.zeros((num_clients, k))
    j = np.zeros((k, num_clients))
    for idx, members in enumerate(clusters):
        p[members, idx] = 1.0 / len(members)
        j[idx, members] = 1.0
    return Assignment([sorted(c) for c in clusters], p, j)


def round_robin_assignment(num_clients: int, k: int) -> Assignment:
    """Initial assignment before any clustering has happened: i -> i mod K."""
    if not (1 <= k <= num_clients):
        raise ConfigError("need 1 <= K <= N")
    clusters = [list(range(c, num_clients, k)) for c in range(k)]
    return build_assignment(clusters, num_clients)


@dataclass
class ServerState:
    omegas: np.ndarray  # d x K
    assignment: Assignment
    round: int = 0
    prev_assignment: Assignment | None = None


@dataclass
class TransitionRecord:
    """How memberships moved between two consecutive assignments."""

    Q: np.ndarray  # K x K row-stochastic matrix
    changed_clients: int
    doubly_stochastic: bool  # rows AND columns sum to 1 (within 1e-12)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Standard k-means++ seeding over the rows of `points`.

    The first centroid is a uniform draw; each subsequent one is sampled
    with probability proportional to the squared distance to the nearest
    centroid chosen so far. If fewer than k distinct points exist the
    remaining centroids duplicate earlier picks, with a warning.
    """
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ConfigError("need 1 <= k <= number of points")
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    if k == 1:
        return centroids
    d2 = _sq_dists(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            warnings.warn(
                f"fewer than {k} distinct points; duplicating centroids",
                stacklevel=2,
            )
            centroids[j:] = centroids[0]
            break
        idx = rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, _sq_dists(points, centroids[j : j + 1]).ravel())
    return centroids


def _within_cluster_sse(points, labels, centroids) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("nd,nd->n", diff, diff).sum())


def _repair_empty(labels: np.ndarray, k: int, d2: np.ndarray) -> np.ndarray:
    """Give each empty cluster the farthest point of a multi-member cluster."""
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        if not movable.any():
            break
        dist = np.where(movable, d2[np.arange(labels.size), labels], -np.inf)
        donor = int(np.argmax(dist))  # ties -> lowest point index
        counts[labels[donor]] -= 1
        labels[donor] = empty
        counts[empty] += 1
    return labels


def lloyd(
    points: np.ndarray,
    init_centroids: np.ndarray,
    max_iters: int = 100,
    tol: float = 1e-9,
) -> KMeansResult:
    """Lloyd iterations from the given initial centroids.

    Assignment ties break to the lowest cluster index; empty clusters are
    repaired by reassigning the globally farthest point. Stops when labels
    stop changing, the largest centroid shift drops below tol, or
    max_iters is reached. The within-cluster SSE recorded after each
    iteration is non-increasing.
    """
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    k = init_centroids.shape[0]
    centroids = init_centroids.copy()
    prev_labels = None
    sse_history: list[float] = []

    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        labels = _repair_empty(labels, k, d2)

        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        sse_history.append(_within_cluster_sse(points, labels, centroids))

        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        if shift < tol:
            break

    return KMeansResult(labels=prev_labels if prev_labels is not None else labels,
                        centroids=centroids, sse_history=sse_history)


def _align_to_prev(labels: np.ndarray, k: int, prev: Assignment) -> np.ndarray:
    """Relabel clusters by greedy maximum overlap with the previous assignment."""
    prev_labels = prev.labels()
    overlap = np.zeros((k, k), dtype=np.int64)
    for new_k in range(k):
        members = labels == new_k
        for prev_k in range(k):
            overlap[new_k, prev_k] = int((prev_labels[members] == prev_k).sum())

    mapping = np.full(k, -1, dtype=np.int64)
    used_prev: set[int] = set()
    pairs = sorted(
        ((int(overlap[a, b]), a, b) for a in range(k) for b in range(k)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    for count, new_k, prev_k in pairs:
        if mapping[new_k] == -1 and prev_k not in used_prev:
            mapping[new_k] = prev_k
            used_prev.add(prev_k)
    leftovers = iter(sorted(set(range(k)) - used_prev))
    for new_k in range(k):
        if mapping[new_k] == -1:
            mapping[new_k] = next(leftovers)
    return mapping[labels]


def cluster_clients(
    uploads: np.ndarray,
    k: int,
    rng: np.random.Generator,
    prev: Assignment | None = None,
) -> Assignment:
    """Cluster the columns of the d x N upload matrix into K groups.

    K=1 is a trivial single cluster (no generator draws). When `prev` is
    given with the same K, labels are aligned to it so a persistent
    partition keeps its indices.
    """
    n = uploads.shape[1]
    if not (1 <= k <= n):
        raise ConfigError("need 1 <= K <= N")
    if k == 1:
        return build_assignment([list(range(n))], n)

    points = uploads.T
    result = lloyd(points, kmeans_pp_seed(points, k, rng))
    labels = result.labels
    if prev is not None and prev.num_clusters == k:
        labels = _align_to_prev(labels, k, prev)
    clusters = [np.flatnonzero(labels == j).tolist() for j in range(k)]
    return build_assignment(clusters, n)


def aggregate(server: ServerState, uploads: np.ndarray, alpha: float) -> np.ndarray:
    """Damped move of the generalized models toward their cluster means.

    Returns (1 - alpha) * omegas + alpha * uploads @ P; alpha = 1 is
    computed directly as uploads @ P so each model lands exactly on its
    cluster mean.
    """
    if not (0.0 < alpha <= 1.0):
        raise ConfigError("alpha must lie in (0, 1]")
    new = aggregate_omegas(server.omegas, uploads, server.assignment.P, alpha)
    if not np.all(np.isfinite(new)):
        raise NumericalError("non-finite aggregated model", round=server.round)
    return new


def aggregate_omegas(
    omegas: np.ndarray, uploads: np.ndarray, p: np.ndarray, alpha: float
) -> np.ndarray:
    # the alpha == 1 branch keeps the arithmetic identical between the
    # clustered path and the single-global baseline, which the K=1
    # reduction test compares bit-for-bit
    if alpha == 1.0:
        return uploads @ p
    return omegas - alpha * (omegas - uploads @ p)


def project_columns(omegas: np.ndarray, radius: float) -> np.ndarray:
    """Scale any column with norm beyond `radius` back onto the ball."""
    if radius <= 0:
        raise ConfigError("projection radius must be positive")
    norms = np.sqrt((omegas**2).sum(axis=0))
    factors = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return omegas * factors


def transition(prev: Assignment, nxt: Assignment) -> TransitionRecord:
    """Membership flow between consecutive assignments.

    Q[j, k] is the fraction of the previous cluster j that moved to the
    new cluster k; rows always sum to 1. The record also flags whether the
    columns sum to 1 as well, which only holds when cluster sizes are
    preserved.
    """
    if prev.num_clients != nxt.num_clients:
        raise ConfigError("assignments cover different client sets")
    kp, kn = prev.num_clusters, nxt.num_clusters
    prev_labels, next_labels = prev.labels(), nxt.labels()
    q = np.zeros((kp, kn))
    for j in range(kp):
        members = prev_labels == j
        counts = np.bincount(next_labels[members], minlength=kn)
        q[j] = counts / members.sum()
    changed = int((prev_labels != next_labels).sum())
    doubly = (
        kp == kn
        and np.allclose(q.sum(axis=0), 1.0, atol=1e-12, rtol=0.0)
        and np.allclose(q.sum(axis=1), 1.0, atol=1e-12, rtol=0.0)
    )
    return TransitionRecord(Q=q, changed_clients=changed, doubly_stochastic=doubly)


def cost(thetas: np.ndarray, omegas: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean squared distance from each model to its nearest
    generalized model: sum_i w_i * min_k ||theta_i - omega_k||^2."""
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ConfigError("weights must sum to 1")
    d2 = _sq_dists(thetas.T, omegas.T)
    return float(weights @ d2.min(axis=1))


@dataclass
class KSelectionRow:
    K: int
    complexity_term: float
    cost_term: float
    e_value: float


def complexity_term(k: int, dim: int, m_total: int) -> float:
    arg = math.e * m_total / dim
    if arg < 1.0:
        raise ConfigError(
            f"model dimension {dim} too large for {m_total} samples "
            "(complexity term undefined); reduce the dimension or add data"
        )
    return math.sqrt(dim * k / m_total * math.log(arg))


def heuristic_select_K(
    vectors: np.ndarray,
    weights: np.ndarray,
    k_range: tuple[int, int],
    mu: float,
    m_total: int,
    dim: int,
    rng: np.random.Generator,
    *,
    restarts: int = 8,
) -> tuple[int, list[KSelectionRow]]:
    """Pick the cluster count minimizing e(K) = complexity(K) + mu * cost(K).

    For each K in [k_min, k_max] the d x N column vectors are clustered
    (k-means++ seeding, Lloyd, best of `restarts` runs) and the clustering
    cost is evaluated against the resulting centroids. Ties go to the
    smaller K.
    """
    k_min, k_max = k_range
    n = vectors.shape[1]
    if not (1 <= k_min <= k_max <= n):
        raise ConfigError("need 1 <= K_min <= K_max <= N")
    if mu < 0:
        raise ConfigError("mu must be non-negative")
    points = vectors.T

    table: list[KSelectionRow] = []
    best_k, best_e = k_min, math.inf
    for k in range(k_min, k_max + 1):
        comp = complexity_term(k, dim, m_total)
        best_centroids = None
        best_sse = math.inf
        for _ in range(restarts):
            result = lloyd(points, kmeans_pp_seed(points, k, rng))
            sse = result.sse_history[-1]
            if sse < best_sse:
                best_sse, best_centroids = sse, result.centroids
        cost_value = cost(vectors, best_centroids.T, weights)
        e_value = comp + mu * cost_value
        table.append(KSelectionRow(k, comp, cost_value, e_value))
        if e_value < best_e:
            best_k, best_e = k, e_value
    return best_k, table
