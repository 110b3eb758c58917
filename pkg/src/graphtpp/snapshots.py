"""Snapshot bipartite graphs and the parameter-free neighbor aggregation.

The observation window [0, T] is cut into N equal segments; snapshot m holds
the distinct user-item edges seen up to time m*d, d = T/N (snapshot 0 is
always empty).  Static embeddings come from R rounds of symmetric-normalized
neighbor propagation, averaged across all R+1 layers.

Aggregation has no learnable parameters, but gradients must still reach the
initial embedding tables during training, so there are two equivalent
implementations: a sparse numpy one (``aggregate``) and a dense tape one
(``aggregate_tape``) that multiplies by the normalized biadjacency matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import EventStream


@dataclass
class SnapshotGraph:
    """Deduplicated bipartite edges accumulated up to one snapshot time."""

    snapshot_index: int
    user_neighbors: list  # per user: sorted intp array of item ids
    item_neighbors: list  # per item: sorted intp array of user ids
    user_degree: np.ndarray
    item_degree: np.ndarray
    _edges: tuple | None = field(default=None, init=False, repr=False)
    _dense_norm: np.ndarray | None = field(default=None, init=False, repr=False)

    @property
    def num_users(self) -> int:
        return len(self.user_neighbors)

    @property
    def num_items(self) -> int:
        return len(self.item_neighbors)

    def edge_arrays(self) -> tuple:
        """Flat (edge_user, edge_item) arrays, cached."""
        if self._edges is None:
            if any(len(nb) for nb in self.user_neighbors):
                eu = np.concatenate(
                    [np.full(len(nb), u, dtype=np.intp) for u, nb in enumerate(self.user_neighbors)]
                )
                ev = np.concatenate([np.asarray(nb, dtype=np.intp) for nb in self.user_neighbors])
            else:
                eu = np.empty(0, dtype=np.intp)
                ev = np.empty(0, dtype=np.intp)
            self._edges = (eu, ev)
        return self._edges

    def normalized_biadjacency(self) -> np.ndarray:
        """Dense (|U|, |V|) matrix with 1/(sqrt|N_u| sqrt|N_v|) at each edge, cached."""
        if self._dense_norm is None:
            b = np.zeros((self.num_users, self.num_items))
            eu, ev = self.edge_arrays()
            if eu.size:
                b[eu, ev] = 1.0 / np.sqrt(self.user_degree[eu] * self.item_degree[ev])
            self._dense_norm = b
        return self._dense_norm


def build_snapshots(stream: EventStream, num_snapshots: int) -> list[SnapshotGraph]:
    """Cumulative deduplicated snapshots at times 0, d, 2d, ..., (N-1)d."""
    if num_snapshots < 1:
        raise ValueError(f"need N >= 1 snapshots, got {num_snapshots}")
    d = stream.horizon_T / num_snapshots
    user_sets: list[set] = [set() for _ in range(stream.num_users)]
    item_sets: list[set] = [set() for _ in range(stream.num_items)]
    out: list[SnapshotGraph] = []
    i = 0
    n = len(stream)
    for m in range(num_snapshots):
        cutoff = m * d
        while i < n and stream.timestamps[i] <= cutoff:
            u, v = int(stream.user_ids[i]), int(stream.item_ids[i])
            user_sets[u].add(v)
            item_sets[v].add(u)
            i += 1
        user_nbrs = [np.array(sorted(s), dtype=np.intp) for s in user_sets]
        item_nbrs = [np.array(sorted(s), dtype=np.intp) for s in item_sets]
        out.append(
            SnapshotGraph(
                snapshot_index=m,
                user_neighbors=user_nbrs,
                item_neighbors=item_nbrs,
                user_degree=np.array([len(s) for s in user_sets], dtype=np.float64),
                item_degree=np.array([len(s) for s in item_sets], dtype=np.float64),
            )
        )
    return out


def snapshot_index_for_time(t: float, horizon_T: float, num_snapshots: int) -> int:
    """Snapshot in effect at time t: floor(t/d) clamped into 0..N-1."""
    if horizon_T <= 0:
        return 0
    m = int(np.floor(t / (horizon_T / num_snapshots)))
    return min(max(m, 0), num_snapshots - 1)


@dataclass
class StaticEmbeddings:
    user_static: np.ndarray  # (|U|, D)
    item_static: np.ndarray  # (|V|, D)
    snapshot_index: int


def _propagate(neighbors, inv_sqrt_own, inv_sqrt_other, source: np.ndarray, edge_own, edge_other) -> np.ndarray:
    out = np.zeros((len(neighbors), source.shape[1]))
    if edge_own.size:
        contrib = source[edge_other] * inv_sqrt_other[edge_other, None]
        np.add.at(out, edge_own, contrib)
        out *= inv_sqrt_own[:, None]
    return out


def aggregate(graph: SnapshotGraph, user_emb0: np.ndarray, item_emb0: np.ndarray, layers: int) -> StaticEmbeddings:
    """Layer-averaged symmetric-normalized propagation (no learnable weights).

    u^{k+1}_u = sum_{v in N_u} v^k_v / (sqrt|N_u| sqrt|N_v|), symmetrically for
    items, with empty neighborhoods propagating zero; the output averages
    layers 0..R.
    """
    user_emb0 = np.asarray(user_emb0, dtype=np.float64)
    item_emb0 = np.asarray(item_emb0, dtype=np.float64)
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if user_emb0.ndim != 2 or item_emb0.ndim != 2 or user_emb0.shape[1] != item_emb0.shape[1]:
        raise ValueError(f"embedding width mismatch: {user_emb0.shape} vs {item_emb0.shape}")
    if user_emb0.shape[0] != graph.num_users or item_emb0.shape[0] != graph.num_items:
        raise ValueError("embedding row counts do not match graph")

    with np.errstate(divide="ignore"):
        inv_u = np.where(graph.user_degree > 0, 1.0 / np.sqrt(graph.user_degree), 0.0)
        inv_v = np.where(graph.item_degree > 0, 1.0 / np.sqrt(graph.item_degree), 0.0)
    eu, ev = graph.edge_arrays()

    acc_u, acc_v = user_emb0.copy(), item_emb0.copy()
    cur_u, cur_v = user_emb0, item_emb0
    for _ in range(layers):
        nxt_u = _propagate(graph.user_neighbors, inv_u, inv_v, cur_v, eu, ev)
        nxt_v = _propagate(graph.item_neighbors, inv_v, inv_u, cur_u, ev, eu)
        acc_u += nxt_u
        acc_v += nxt_v
        cur_u, cur_v = nxt_u, nxt_v
    acc_u /= layers + 1
    acc_v /= layers + 1
    if not (np.all(np.isfinite(acc_u)) and np.all(np.isfinite(acc_v))):
        raise FloatingPointError("aggregation produced non-finite embeddings")
    return StaticEmbeddings(acc_u, acc_v, graph.snapshot_index)


def aggregate_tape(graph: SnapshotGraph, user_emb0: ad.Tensor, item_emb0: ad.Tensor, layers: int):
    """Differentiable twin of ``aggregate`` for training; returns two tensors."""
    b = ad.Tensor(graph.normalized_biadjacency())
    bt = ad.Tensor(b.value.T.copy())
    acc_u, acc_v = user_emb0, item_emb0
    cur_u, cur_v = user_emb0, item_emb0
    for _ in range(layers):
        nxt_u = ad.matmul(b, cur_v)
        nxt_v = ad.matmul(bt, cur_u)
        acc_u = ad.add(acc_u, nxt_u)
        acc_v = ad.add(acc_v, nxt_v)
        cur_u, cur_v = nxt_u, nxt_v
    scale = 1.0 / (layers + 1)
    return ad.mul(acc_u, scale), ad.mul(acc_v, scale)
