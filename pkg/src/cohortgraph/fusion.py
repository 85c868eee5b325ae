"""Joint multimodal fusion, graph and MLP classification heads, and the KNN baselines."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .gnn import AttentionTrace, GATLayer, SAGELayer
from .nn import BatchNorm, Dropout, Linear, Module
from .popgraph import nearest, pairwise_distances, rbf_similarity
from .segnet import LEAKY_SLOPE
from .tensor import DimensionError, Tensor

FUSED_WIDTH = 32
MODES = ("concat", "average", "maxpool")


def _leaky(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LEAKY_SLOPE)


class JointFusion(Module):
    """Project each modality to ``width`` features, activate, then aggregate.

    ``dims`` maps modality names to input widths, in the order used for
    concatenation.  Projections carry no bias, so all-zero inputs give a
    zero fused vector.
    """

    def __init__(self, dims: dict, rng: np.random.Generator, width: int = FUSED_WIDTH, mode: str = "concat", dtype=np.float32):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown aggregation {mode!r}; expected one of {MODES}")
        if not dims:
            raise ValueError("fusion needs at least one modality")
        self.names = tuple(dims)
        self.mode, self.width = mode, width
        self.proj = [Linear(dims[name], width, rng, dtype, bias=False) for name in self.names]

    @property
    def out_features(self) -> int:
        return self.width * len(self.names) if self.mode == "concat" else self.width

    def forward(self, inputs: dict) -> Tensor:
        missing = [n for n in self.names if n not in inputs]
        if missing:
            raise DimensionError(f"fusion inputs lack modalities {missing}")
        parts = [_leaky(layer(T.as_tensor(inputs[name]))) for name, layer in zip(self.names, self.proj)]
        if len(parts) == 1:
            return parts[0]
        if self.mode == "concat":
            return T.concat(parts, axis=-1)
        stacked = T.stack(parts, axis=0)
        return T.reduce_mean(stacked, axis=0) if self.mode == "average" else T.reduce_max(stacked, axis=0)


@dataclass(frozen=True)
class HeadConfig:
    layers: int = 2
    heads: int = 5
    hidden: int = 64
    dropout: float = 0.10
    n_labels: int = 1


class GATHead(Module):
    """Batchnorm and dropout on the fused features, then two GAT layers.

    The first layer concatenates its heads, the second averages them into
    one logit per label.  ``forward`` returns logits and the attention trace.
    """

    def __init__(self, n_in: int, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if cfg.layers != 2:
            raise ValueError("the graph head has exactly two attention layers")
        self.cfg = cfg
        self.norm = BatchNorm(n_in, dtype)
        self.drop = Dropout(cfg.dropout)
        self.gat1 = GATLayer(n_in, cfg.hidden, cfg.heads, rng, concat=True, activation=_leaky, dtype=dtype)
        self.gat2 = GATLayer(self.gat1.out_features, cfg.n_labels, cfg.heads, rng, concat=False, dtype=dtype)

    def forward(self, z: Tensor, adjacency: np.ndarray, rng=None, nodes: Optional[Sequence] = None):
        z = self.drop(self.norm(z), rng)
        h, a1 = self.gat1(z, adjacency)
        logits, a2 = self.gat2(h, adjacency)
        nodes = list(nodes) if nodes is not None else list(range(z.shape[0]))
        return logits, AttentionTrace(nodes, [a1, a2])


class SAGEHead(Module):
    """GraphSAGE replacement for :class:`GATHead` (mean aggregation)."""

    def __init__(self, n_in: int, cfg: HeadConfig, rng: np.random.Generator, sample_size: Optional[int] = None, dtype=np.float32):
        super().__init__()
        self.norm = BatchNorm(n_in, dtype)
        self.drop = Dropout(cfg.dropout)
        self.sage1 = SAGELayer(n_in, cfg.hidden, rng, sample_size, activation=_leaky, dtype=dtype)
        self.sage2 = SAGELayer(cfg.hidden, cfg.n_labels, rng, sample_size, dtype=dtype)

    def forward(self, z: Tensor, adjacency: np.ndarray, rng=None, nodes=None):
        z = self.drop(self.norm(z), rng)
        return self.sage2(self.sage1(z, adjacency, rng), adjacency, rng), None


class MLPHead(Module):
    """linear -> leaky-ReLU -> dropout -> linear; ignores the graph."""

    def __init__(self, n_in: int, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(n_in, cfg.hidden, rng, dtype)
        self.drop = Dropout(cfg.dropout)
        self.fc2 = Linear(cfg.hidden, cfg.n_labels, rng, dtype)

    def forward(self, z: Tensor, adjacency=None, rng=None, nodes=None):
        return self.fc2(self.drop(_leaky(self.fc1(z)), rng)), None


def _as_label_matrix(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def wknn_classify(test_features, train_features, train_labels, weights, k: int, mu: float, p: float = 2.0, squared: bool = False) -> np.ndarray:
    """Similarity-weighted vote of the k nearest training nodes.

    Returns (n_test, n_labels) probabilities ``sum Sim_j y_j / sum Sim_j``.
    """
    train_features = np.atleast_2d(np.asarray(train_features, dtype=float))
    y = _as_label_matrix(train_labels)
    if train_features.shape[0] < k:
        raise ValueError(f"need at least k={k} training nodes, got {train_features.shape[0]}")
    dist = pairwise_distances(test_features, train_features, weights, p)
    out = np.empty((dist.shape[0], y.shape[1]))
    for i, row in enumerate(dist):
        nbrs = nearest(row, k)
        sim = rbf_similarity(row[nbrs], mu, squared)
        out[i] = sim @ y[nbrs] / sim.sum()
    return out


def knn_classify(test_features, train_features, train_labels, k: int) -> np.ndarray:
    """Inverse-Euclidean-distance vote; exact matches return their own label mean."""
    train_features = np.atleast_2d(np.asarray(train_features, dtype=float))
    y = _as_label_matrix(train_labels)
    if train_features.shape[0] < k:
        raise ValueError(f"need at least k={k} training nodes, got {train_features.shape[0]}")
    dist = pairwise_distances(test_features, train_features, np.ones(train_features.shape[1]), 2.0)
    out = np.empty((dist.shape[0], y.shape[1]))
    for i, row in enumerate(dist):
        nbrs = nearest(row, k)
        d = row[nbrs]
        if np.any(d == 0):
            out[i] = y[nbrs[d == 0]].mean(axis=0)
        else:
            w = 1.0 / d
            out[i] = w @ y[nbrs] / w.sum()
    return out


def decide(probability, threshold):
    """Positive only when strictly above the threshold."""
    return np.asarray(probability) > threshold


def write_predictions_csv(path, ids: Sequence, labels, probabilities, threshold: float) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "probability", "threshold", "decision"))
        for pid, y, pr in zip(ids, labels, probabilities):
            w.writerow((pid, int(y), repr(float(pr)), repr(float(threshold)), int(decide(pr, threshold))))


def read_predictions_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "ids": [r["id"] for r in rows],
        "labels": np.array([int(r["label"]) for r in rows]),
        "probabilities": np.array([float(r["probability"]) for r in rows]),
        "threshold": float(rows[0]["threshold"]) if rows else 0.5,
        "decisions": np.array([int(r["decision"]) for r in rows]),
    }
