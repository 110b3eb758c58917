"""Learnable node embedding tables and the continuous time embedding.

The time embedding maps an elapsed time and a sequence position to a bounded
D-vector: with 1-based dimension i, odd dimensions take
cos(omega_i*(t - t_x) + h/base^((i-1)/D)) and even dimensions take
sin(omega_i*(t - t_x) + h/base^(i/D)), base 10000.  The frequencies omega
are learnable; ``h`` is the 1-based position of the anchoring event in its
user's history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DENOM_BASE = 10000.0


@dataclass
class NodeEmbeddingTable:
    """Stacked user rows then item rows, |U|+|V| by D."""

    weights: np.ndarray
    embed_dim: int
    num_users: int

    @property
    def user_rows(self) -> np.ndarray:
        return self.weights[: self.num_users]

    @property
    def item_rows(self) -> np.ndarray:
        return self.weights[self.num_users :]


def init_node_embeddings(num_users: int, num_items: int, embed_dim: int, seed: int) -> NodeEmbeddingTable:
    """Rows ~ N(0, 1/D) i.i.d., so row norms concentrate near 1."""
    if embed_dim < 2 or embed_dim % 2:
        raise ValueError(f"embed_dim must be even and >= 2, got {embed_dim}")
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(num_users + num_items, embed_dim))
    return NodeEmbeddingTable(weights, embed_dim, num_users)


@dataclass
class TimeEmbeddingParams:
    omega: np.ndarray  # (D,), learnable frequencies
    embed_dim: int
    denom_base: float = DENOM_BASE


def init_time_embedding(embed_dim: int) -> TimeEmbeddingParams:
    """Geometric frequency ladder omega_i = base^-((i-1)/D) as the trainable start."""
    if embed_dim < 2 or embed_dim % 2:
        raise ValueError(f"embed_dim must be even and >= 2, got {embed_dim}")
    j = np.arange(embed_dim, dtype=np.float64)  # j = i-1
    return TimeEmbeddingParams(DENOM_BASE ** (-j / embed_dim), embed_dim)


def phase_scales(embed_dim: int, denom_base: float = DENOM_BASE) -> np.ndarray:
    """Per-dimension positional scale: h enters as h * base^-e_i.

    With 1-based i: e_i = (i-1)/D on the cosine (odd-i) dims, i/D on the
    sine (even-i) dims.
    """
    i = np.arange(1, embed_dim + 1, dtype=np.float64)
    exponents = np.where(i % 2 == 1, (i - 1.0) / embed_dim, i / embed_dim)
    return denom_base**-exponents


def parity_masks(embed_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(cosine mask, sine mask) over 0-based dims; odd 1-based i is cosine."""
    i = np.arange(1, embed_dim + 1)
    cos_mask = (i % 2 == 1).astype(np.float64)
    return cos_mask, 1.0 - cos_mask


def time_embedding(params: TimeEmbeddingParams, t: float, t_x: float, h: int) -> np.ndarray:
    """Evaluate the D-vector embedding of time t anchored at event (t_x, h)."""
    if t < t_x:
        raise ValueError(f"t={t} precedes anchor t_x={t_x}")
    if h < 0:
        raise ValueError("h must be >= 0")
    arg = params.omega * (t - t_x) + h * phase_scales(params.embed_dim, params.denom_base)
    cos_mask, sin_mask = parity_masks(params.embed_dim)
    return cos_mask * np.cos(arg) + sin_mask * np.sin(arg)


def time_embedding_rows(params: TimeEmbeddingParams, t: float, t_x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-stacked embeddings for several anchors evaluated at one time t."""
    t_x = np.asarray(t_x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if t_x.size and t < t_x.max():
        raise ValueError("t precedes an anchor")
    arg = (t - t_x)[:, None] * params.omega[None, :] + h[:, None] * phase_scales(
        params.embed_dim, params.denom_base
    )
    cos_mask, sin_mask = parity_masks(params.embed_dim)
    return cos_mask * np.cos(arg) + sin_mask * np.sin(arg)


def time_embedding_rows_tape(
    omega: ad.Tensor, t: float, t_x: np.ndarray, h: np.ndarray, embed_dim: int, denom_base: float = DENOM_BASE
) -> ad.Tensor:
    """Differentiable twin of ``time_embedding_rows`` (gradients reach omega)."""
    t_x = np.asarray(t_x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    dt_col = ad.Tensor((t - t_x)[:, None])
    offsets = ad.Tensor(h[:, None] * phase_scales(embed_dim, denom_base))
    arg = ad.add(ad.mul(dt_col, omega), offsets)
    cos_mask, sin_mask = parity_masks(embed_dim)
    return ad.add(ad.mul(ad.cos(arg), ad.Tensor(cos_mask)), ad.mul(ad.sin(arg), ad.Tensor(sin_mask)))
