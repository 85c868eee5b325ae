"""Graph layers on dense adjacency masks: multi-head GAT, GraphSAGE and a Chebyshev convolution reference."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, glorot, parameter
from .tensor import DimensionError, Tensor

ATTENTION_SLOPE = 0.2


def with_self_loops(adjacency: np.ndarray) -> np.ndarray:
    adj = np.asarray(adjacency, dtype=bool).copy()
    np.fill_diagonal(adj, True)
    return adj


def _check_graph(z: Tensor, adjacency: np.ndarray) -> None:
    n = z.shape[0]
    if adjacency.shape != (n, n):
        raise DimensionError(f"graph has shape {adjacency.shape} but features have {n} rows")


class GATLayer(Module):
    """Multi-head graph attention.

    For head p, ``e_ij = leaky_relu(a_p . [W_p z_i || W_p z_j], 0.2)`` and the
    coefficients are a softmax of ``e_ij`` over ``j`` in the neighbourhood of
    ``i`` plus ``i`` itself.  Heads are concatenated (``concat=True``) or
    averaged, and ``activation`` is applied last.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        heads: int,
        rng: np.random.Generator,
        concat: bool = True,
        activation: Optional[Callable] = None,
        dtype=np.float32,
    ):
        super().__init__()
        self.n_in, self.n_out, self.heads, self.concat = n_in, n_out, heads, concat
        self.activation = activation
        self.weight = parameter(glorot(rng, n_in, n_out, (n_in, heads * n_out), dtype))
        self.att_src = parameter(glorot(rng, 2 * n_out, 1, (heads, 1, n_out), dtype))
        self.att_dst = parameter(glorot(rng, 2 * n_out, 1, (heads, 1, n_out), dtype))

    @property
    def out_features(self) -> int:
        return self.heads * self.n_out if self.concat else self.n_out

    def forward(self, z: Tensor, adjacency: np.ndarray):
        """Return the new node features and the (heads, N, N) attention array."""
        if z.shape[-1] != self.n_in:
            raise DimensionError(f"GAT layer expects {self.n_in} input features, got shape {z.shape}")
        adjacency = np.asarray(adjacency, dtype=bool)
        _check_graph(z, adjacency)
        mask = with_self_loops(adjacency)
        n = z.shape[0]
        h = T.transpose(T.reshape(T.matmul(z, self.weight), (n, self.heads, self.n_out)), (1, 0, 2))
        # (heads, N, 1) and (heads, 1, N) halves of the attention logit
        src = T.reduce_sum(T.mul(h, self.att_src), axis=2, keepdims=True)
        dst = T.transpose(T.reduce_sum(T.mul(h, self.att_dst), axis=2, keepdims=True), (0, 2, 1))
        logits = T.leaky_relu(T.add(src, dst), ATTENTION_SLOPE)
        alpha = T.softmax(logits, axis=2, mask=mask[None])
        mixed = T.matmul(alpha, h)  # (heads, N, F)
        if self.concat:
            out = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, self.heads * self.n_out))
        else:
            out = T.reduce_mean(mixed, axis=0)
        if self.activation is not None:
            out = self.activation(out)
        return out, alpha.data.copy()


class SAGELayer(Module):
    """GraphSAGE: ``z'_i = act(W [z_i || mean of sampled neighbours] + b)``.

    With ``sample_size=None`` the full neighbourhood is averaged.  Otherwise
    ``sample_size`` neighbours are drawn, with replacement only when the
    neighbourhood is smaller than the sample.  Nodes without neighbours get
    a zero aggregate and are reported in ``isolated``.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        sample_size: Optional[int] = None,
        activation: Optional[Callable] = None,
        dtype=np.float32,
    ):
        super().__init__()
        if sample_size is not None and sample_size < 1:
            raise ValueError(f"sample size must be >= 1, got {sample_size}")
        self.sample_size = sample_size
        self.activation = activation
        self.proj = Linear(2 * n_in, n_out, rng, dtype)
        self.isolated: tuple = ()

    def aggregation_matrix(self, adjacency: np.ndarray, rng=None) -> np.ndarray:
        adj = np.asarray(adjacency, dtype=bool).copy()
        np.fill_diagonal(adj, False)
        n = adj.shape[0]
        agg = np.zeros((n, n))
        isolated = []
        for i in range(n):
            nbrs = np.flatnonzero(adj[i])
            if nbrs.size == 0:
                isolated.append(i)
                continue
            if self.sample_size is None:
                agg[i, nbrs] = 1.0 / nbrs.size
                continue
            if rng is None:
                raise ValueError("neighbour sampling needs an rng")
            picks = rng.choice(nbrs, size=self.sample_size, replace=nbrs.size < self.sample_size)
            np.add.at(agg[i], picks, 1.0 / self.sample_size)
        self.isolated = tuple(isolated)
        if isolated:
            warnings.warn(f"{len(isolated)} node(s) have no neighbours; using a zero aggregate", RuntimeWarning)
        return agg

    def forward(self, z: Tensor, adjacency: np.ndarray, rng: Optional[np.random.Generator] = None):
        adjacency = np.asarray(adjacency, dtype=bool)
        _check_graph(z, adjacency)
        agg = Tensor(self.aggregation_matrix(adjacency, rng).astype(z.dtype))
        out = self.proj(T.concat([z, T.matmul(agg, z)], axis=1))
        return out if self.activation is None else self.activation(out)


# -- Chebyshev spectral convolution (forward reference) ----------------------

def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2`` of the symmetrised graph; zero degrees count as 1."""
    w = np.asarray(adjacency, dtype=float)
    w = np.maximum(w, w.T)
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    deg[deg == 0] = 1.0
    inv = 1.0 / np.sqrt(deg)
    return np.eye(w.shape[0]) - inv[:, None] * w * inv[None, :]


def largest_eigenvalue(m: np.ndarray, iters: int = 2000, tol: float = 1e-12) -> float:
    """Power iteration for a symmetric positive semi-definite matrix."""
    n = m.shape[0]
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = float(v @ m @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def cheb_conv(x: np.ndarray, adjacency: np.ndarray, thetas: Sequence, lambda_max: Optional[float] = None) -> np.ndarray:
    """``sum_k theta_k T_k(L_bar) X`` with ``L_bar = 2 L / lambda_max - I``.

    Each ``theta_k`` is a scalar or an (F_in, F_out) matrix.
    """
    x = np.asarray(x, dtype=float)
    lap = normalized_laplacian(adjacency)
    if lambda_max is None:
        lambda_max = largest_eigenvalue(lap)
    if lambda_max <= 0:
        lambda_max = 2.0
    scaled = (2.0 / lambda_max) * lap - np.eye(lap.shape[0])

    def apply(theta, tk):
        theta = np.asarray(theta, dtype=float)
        return theta * tk if theta.ndim == 0 else tk @ theta

    prev, cur = x, scaled @ x
    out = apply(thetas[0], prev)
    for k in range(1, len(thetas)):
        if k > 1:
            prev, cur = cur, 2.0 * scaled @ cur - prev
        out = out + apply(thetas[k], cur)
    return out


def two_hop_attention(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Compose head-averaged attention of two layers: ``A2 @ A1``."""
    first, second = np.asarray(first), np.asarray(second)
    if first.shape != second.shape or first.ndim != 2 or first.shape[0] != first.shape[1]:
        raise DimensionError(f"attention matrices disagree: {first.shape} vs {second.shape}")
    return second @ first


@dataclass
class AttentionTrace:
    """Per-layer attention arrays of shape (heads, N, N) over a node set."""

    nodes: list
    layers: list = field(default_factory=list)

    def mean(self, layer: int) -> np.ndarray:
        return self.layers[layer].mean(axis=0)

    def two_hop(self) -> np.ndarray:
        if len(self.layers) < 2:
            raise ValueError("two-hop attention needs two layers")
        return two_hop_attention(self.mean(0), self.mean(1))

    def ranking(self, node: int = 0) -> list:
        """Nodes ordered by two-hop attention received from ``node``."""
        row = self.two_hop()[node]
        order = np.lexsort((np.arange(row.size), -row))
        return [(self.nodes[j], float(row[j])) for j in order if row[j] > 0]

    def to_dict(self) -> dict:
        entries = []
        for li, arr in enumerate(self.layers):
            for hi in range(arr.shape[0]):
                rows = []
                for i in range(arr.shape[1]):
                    nbrs = np.flatnonzero(arr[hi, i] > 0)
                    rows.append({
                        "node": self.nodes[i],
                        "neighbors": [{"node": self.nodes[j], "alpha": float(arr[hi, i, j])} for j in nbrs],
                    })
                entries.append({"layer": li, "head": hi, "rows": rows})
        out = {"nodes": list(self.nodes), "attention": entries}
        if len(self.layers) >= 2:
            out["two_hop"] = self.two_hop().tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionTrace":
        nodes = list(d["nodes"])
        pos = {node: i for i, node in enumerate(nodes)}
        n = len(nodes)
        n_layers = 1 + max((e["layer"] for e in d["attention"]), default=-1)
        layers = []
        for li in range(n_layers):
            entries = sorted((e for e in d["attention"] if e["layer"] == li), key=lambda e: e["head"])
            arr = np.zeros((len(entries), n, n))
            for e in entries:
                for row in e["rows"]:
                    i = pos[row["node"]]
                    for nb in row["neighbors"]:
                        arr[e["head"], i, pos[nb["node"]]] = nb["alpha"]
            layers.append(arr)
        return cls(nodes, layers)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
