"""Feature weighting, weighted Minkowski distances and KNN population graphs."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import digamma

from . import kernels

CONTEXT_SIZE = 18


@dataclass(frozen=True)
class FeatureWeights:
    weights: np.ndarray
    method: str = "uniform"
    names: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("feature weights must be nonnegative with at least one positive entry")
        if self.method not in ("uniform", "mutual-information", "pearson-abs"):
            raise ValueError(f"unknown weighting method {self.method!r}")

    @classmethod
    def uniform(cls, d: int, names: Sequence[str] = ()) -> "FeatureWeights":
        return cls(np.ones(d), "uniform", tuple(names))


def severity_encode(icu, vent, mort) -> np.ndarray:
    """Ordinal severity: number of adverse outcomes (0-3)."""
    return np.asarray(icu, dtype=int) + np.asarray(vent, dtype=int) + np.asarray(mort, dtype=int)


def mi_estimate(
    feature,
    labels,
    k_mi: int = 3,
    reps: int = 30,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
) -> float:
    """Mutual information (nats) between a continuous feature and discrete labels.

    Nearest-neighbour estimator for mixed continuous/discrete pairs: for each
    sample the distance ``d`` to its k-th neighbour within its own class sets
    a radius, ``m`` counts all samples within it, and

        I = psi(N) + <psi(k)> - <psi(N_class)> - <psi(m)>.

    Each repetition adds tie-breaking jitter of 1e-10 * std(feature); the
    result is the mean over repetitions, clamped at zero.
    """
    x = np.asarray(feature, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if x.shape != y.shape:
        raise ValueError(f"feature has {x.size} samples but labels have {y.size}")
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    if classes.size < 2:
        warnings.warn("mutual information with a single-class label is zero", RuntimeWarning)
        return 0.0
    if x.size < k_mi + 2:
        raise ValueError(f"need at least {k_mi + 2} samples, got {x.size}")
    if rng is None:
        rng = np.random.default_rng(seed)
    keep = counts[inverse] > 1
    x, inverse = x[keep], inverse[keep]
    n_class = counts[inverse]
    k = np.minimum(k_mi, n_class - 1).astype(np.int64)
    n = x.size
    scale = np.std(x)
    # constant terms of the estimator
    base = digamma(n) + digamma(k).mean() - digamma(n_class).mean()
    total = 0.0
    for _ in range(reps):
        xj = x + 1e-10 * scale * rng.standard_normal(n) if scale > 0 else x
        radius = kernels.same_label_kth_distance(xj, inverse.astype(np.int64), k)
        radius = np.nextafter(radius, 0)
        m = kernels.count_within(xj, radius)
        total += max(0.0, base - digamma(m).mean())
    return total / reps


def pearson(feature, labels) -> float:
    x = np.asarray(feature, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((dx * dx).sum()), math.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        warnings.warn("Pearson correlation of a constant input is reported as 0", RuntimeWarning)
        return 0.0
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def fit_feature_weights(
    features: np.ndarray,
    labels,
    method: str = "mutual-information",
    names: Sequence[str] = (),
    k_mi: int = 3,
    reps: int = 30,
    seed: int = 0,
) -> FeatureWeights:
    """Per-column weights from training rows: MI with the labels or |Pearson r|.

    If every estimate is zero the weights fall back to uniform.
    """
    features = np.asarray(features, dtype=float)
    d = features.shape[1]
    if method == "uniform":
        return FeatureWeights.uniform(d, names)
    rng = np.random.default_rng(seed)
    if method == "mutual-information":
        w = np.array([mi_estimate(features[:, j], labels, k_mi, reps, rng=rng) for j in range(d)])
    elif method == "pearson-abs":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            w = np.array([abs(pearson(features[:, j], labels)) for j in range(d)])
    else:
        raise ValueError(f"unknown weighting method {method!r}")
    if not np.any(w > 0):
        warnings.warn("all feature weights are zero; using uniform weights", RuntimeWarning)
        return FeatureWeights.uniform(d, names)
    return FeatureWeights(w, method, tuple(names))


def weighted_minkowski(fi, fj, weights, p: float = 2.0) -> float:
    fi, fj, w = (np.asarray(v, dtype=float).ravel() for v in (fi, fj, weights))
    if not (fi.shape == fj.shape == w.shape):
        raise ValueError(f"dimension mismatch: {fi.shape}, {fj.shape}, weights {w.shape}")
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    return float((np.abs(w * (fi - fj)) ** p).sum() ** (1.0 / p))


def pairwise_distances(a: np.ndarray, b: np.ndarray, weights, p: float = 2.0) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    w = np.asarray(weights, dtype=float).ravel()
    if a.shape[1] != b.shape[1] or a.shape[1] != w.size:
        raise ValueError(f"dimension mismatch: {a.shape}, {b.shape}, weights {w.shape}")
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    return kernels.pairwise_minkowski(a, b, w, p)


def rbf_similarity(distance, mu: float, squared: bool = False):
    """``exp(-d / (2 mu^2))``; ``squared=True`` uses ``d^2`` in the exponent."""
    if mu <= 0:
        raise ValueError(f"mean distance must be positive, got {mu}")
    d = np.asarray(distance, dtype=float)
    out = np.exp(-(d * d if squared else d) / (2.0 * mu * mu))
    return float(out) if out.ndim == 0 else out


def nearest(row: np.ndarray, k: int, exclude: Optional[int] = None) -> np.ndarray:
    """Indices of the k smallest entries, ties broken by ascending index."""
    idx = np.arange(row.size)
    if exclude is not None:
        idx = idx[idx != exclude]
    order = np.lexsort((idx, row[idx]))
    return idx[order[:k]]


@dataclass
class PopulationGraph:
    """Directed KNN graph: ``neighbors[i]`` are the k nodes node i aggregates from."""

    ids: list
    neighbors: np.ndarray  # (n, k) int
    distances: np.ndarray  # (n, k)
    k: int
    mu: float
    squared_kernel: bool = False
    features: Optional[np.ndarray] = field(default=None, repr=False)
    weights: Optional[FeatureWeights] = None
    p: float = 2.0

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def similarities(self) -> np.ndarray:
        return rbf_similarity(self.distances, self.mu, self.squared_kernel)

    def edges(self):
        for i in range(self.n):
            for j, d in zip(self.neighbors[i], self.distances[i]):
                yield i, int(j), float(d)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        rows = np.repeat(np.arange(self.n), self.k)
        a[rows, self.neighbors.ravel()] = True
        return a

    def to_csv(self, path) -> None:
        sims = self.similarities
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("src", "dst", "distance", "similarity"))
            for i in range(self.n):
                for slot, j in enumerate(self.neighbors[i]):
                    w.writerow((self.ids[i], self.ids[j], repr(float(self.distances[i, slot])), repr(float(sims[i, slot]))))


def mean_pairwise_distance(dist: np.ndarray) -> float:
    n = dist.shape[0]
    off = ~np.eye(n, dtype=bool)
    return float(dist[off].mean())


def knn_graph(
    features: np.ndarray,
    weights=None,
    k: int = 7,
    p: float = 2.0,
    ids: Optional[Sequence] = None,
    squared_kernel: bool = False,
) -> PopulationGraph:
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n <= k:
        raise ValueError(f"a {k}-NN graph needs more than {k} nodes, got {n}")
    if weights is None:
        weights = FeatureWeights.uniform(features.shape[1])
    elif not isinstance(weights, FeatureWeights):
        weights = FeatureWeights(np.asarray(weights, dtype=float), "uniform")
    dist = pairwise_distances(features, features, weights.weights, p)
    nbrs = np.stack([nearest(dist[i], k, exclude=i) for i in range(n)])
    mu = mean_pairwise_distance(dist)
    if mu <= 0:
        mu = 1.0
    return PopulationGraph(
        ids=list(ids) if ids is not None else list(range(n)),
        neighbors=nbrs,
        distances=np.take_along_axis(dist, nbrs, axis=1),
        k=k,
        mu=mu,
        squared_kernel=squared_kernel,
        features=features,
        weights=weights,
        p=p,
    )


@dataclass
class BatchGraph:
    """A small graph handed to a graph head.

    ``nodes`` are indices into the training cohort, or -1 for the attached
    (test/validation) node at position 0.  ``adjacency[i, j]`` is True when
    node i aggregates from node j; self-loops are not included.
    """

    nodes: np.ndarray
    adjacency: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nodes)


def induced_subgraph(graph: PopulationGraph, nodes: Sequence[int]) -> np.ndarray:
    nodes = np.asarray(nodes)
    pos = {int(v): i for i, v in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)), dtype=bool)
    for a, v in enumerate(nodes):
        if v < 0:
            continue
        for u in graph.neighbors[v]:
            b = pos.get(int(u))
            if b is not None:
                adj[a, b] = True
    return adj


def attach_test_node(
    graph: PopulationGraph,
    test_features: np.ndarray,
    context_size: int = CONTEXT_SIZE,
) -> BatchGraph:
    """Connect one new node to its k nearest training nodes.

    The batch context is those k neighbours padded with the next-nearest
    training nodes up to ``context_size``.  Training nodes keep their own
    out-edges restricted to the context; no training node points at the new
    node.
    """
    if graph.features is None:
        raise ValueError("graph was built without stored training features")
    test_features = np.asarray(test_features, dtype=float).ravel()
    if np.any(np.isnan(test_features)):
        raise ValueError("test node features are missing (no radiomics prediction?)")
    d = pairwise_distances(test_features[None], graph.features, graph.weights.weights, graph.p)[0]
    size = min(max(context_size, graph.k), graph.n)
    context = nearest(d, size)
    nodes = np.concatenate([[-1], context])
    adj = induced_subgraph(graph, nodes)
    adj[0, 1:graph.k + 1] = True
    dist = np.zeros_like(adj, dtype=float)
    dist[0, 1:] = d[context]
    return BatchGraph(nodes=nodes, adjacency=adj, distances=dist)


def training_batch(graph: PopulationGraph, anchors: Sequence[int]) -> BatchGraph:
    """Anchors plus their k nearest neighbours, with the induced graph edges."""
    anchors = [int(a) for a in anchors]
    members = list(dict.fromkeys(anchors + [int(u) for a in anchors for u in graph.neighbors[a]]))
    nodes = np.asarray(members)
    adj = induced_subgraph(graph, nodes)
    return BatchGraph(nodes=nodes, adjacency=adj, distances=np.zeros(adj.shape))


def write_weights_csv(path, weights: FeatureWeights, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("feature", "weight", "method"))
        for name, value in zip(names, weights.weights):
            w.writerow((name, repr(float(value)), weights.method))


def read_weights_csv(path) -> FeatureWeights:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return FeatureWeights(
        np.array([float(r["weight"]) for r in rows]),
        rows[0]["method"] if rows else "uniform",
        tuple(r["feature"] for r in rows),
    )
