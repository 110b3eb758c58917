"""Time-dependent embeddings: attentive history interaction, gated fusion,
and the temporal shift extrapolator.

All math runs through the autodiff tape so gradients reach every parameter;
the public array-returning wrappers evaluate the same graph with constant
inputs.  Parameter containers hold either plain numpy arrays (evaluation) or
``autodiff.Parameter`` tensors (training) in the same fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .embeddings import NodeEmbeddingTable, TimeEmbeddingParams, time_embedding_rows_tape

# at most this many trailing events per user enter the attention window
HISTORY_MAX_DEFAULT = 64


@dataclass
class AttentionParams:
    """Single-block attention: query/key maps on [user | item+time] (width 2D)."""

    query_w: np.ndarray  # (2D, D_a)
    key_w: np.ndarray  # (2D, D_a)
    value_w: np.ndarray  # (D, D)


@dataclass
class GruCellParams:
    """One gated cell; gate blocks packed [update | reset | candidate]."""

    w_input: np.ndarray  # (D, 3D)
    w_state: np.ndarray  # (D, 3D)
    bias: np.ndarray  # (3D,)


@dataclass
class GruParams:
    user_cell: GruCellParams
    item_cell: GruCellParams


@dataclass
class ShiftParams:
    w_user: np.ndarray  # (|U|, D)
    w_item: np.ndarray  # (|V|, D)


@dataclass
class UserHistory:
    """Ordered (item, time) pairs of one user's past interactions."""

    item_ids: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def append(self, item_id: int, t: float) -> None:
        if self.times and t < self.times[-1]:
            raise ValueError(f"history timestamps must be non-decreasing: {t} after {self.times[-1]}")
        self.item_ids.append(int(item_id))
        self.times.append(float(t))

    def __len__(self) -> int:
        return len(self.times)

    def recent(self, max_events: int):
        """Last ``max_events`` entries as arrays plus their global 1-based positions."""
        start = max(0, len(self.times) - max_events)
        items = np.asarray(self.item_ids[start:], dtype=np.intp)
        times = np.asarray(self.times[start:], dtype=np.float64)
        positions = np.arange(start + 1, len(self.times) + 1, dtype=np.float64)
        return items, times, positions


def init_attention(embed_dim: int, attn_dim: int, seed: int) -> AttentionParams:
    rng = np.random.default_rng(seed)
    s_qk = 1.0 / np.sqrt(2 * embed_dim)
    s_v = 1.0 / np.sqrt(embed_dim)
    return AttentionParams(
        rng.normal(0.0, s_qk, size=(2 * embed_dim, attn_dim)),
        rng.normal(0.0, s_qk, size=(2 * embed_dim, attn_dim)),
        rng.normal(0.0, s_v, size=(embed_dim, embed_dim)),
    )


def init_gru(embed_dim: int, seed: int) -> GruParams:
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(embed_dim)

    def cell():
        return GruCellParams(
            rng.normal(0.0, s, size=(embed_dim, 3 * embed_dim)),
            rng.normal(0.0, s, size=(embed_dim, 3 * embed_dim)),
            np.zeros(3 * embed_dim),
        )

    return GruParams(cell(), cell())


def init_shift(num_users: int, num_items: int, embed_dim: int) -> ShiftParams:
    # zero shift rates: extrapolation starts as the identity and is learned
    return ShiftParams(np.zeros((num_users, embed_dim)), np.zeros((num_items, embed_dim)))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_alpha(user_vec, item_rows, time_rows, attn: AttentionParams, embed_dim: int, dropout_mask=None):
    """Softmax weights over history rows; the query anchors on the LAST row.

    Scores are (query . key_m) with query [user | last_item + last_time] and
    key_m [user | item_m + time_m]; both concatenations are evaluated as
    top/bottom halves of the 2D-wide projection matrices.
    """
    d = embed_dim
    q_w, k_w = ad.as_tensor(attn.query_w), ad.as_tensor(attn.key_w)
    last = item_rows.shape[0] - 1
    query_item = ad.take_row(item_rows, last)
    query_time = ad.take_row(time_rows, last)
    query = ad.add(
        ad.vecmat(user_vec, ad.narrow(q_w, 0, d)),
        ad.vecmat(ad.add(query_item, query_time), ad.narrow(q_w, d, 2 * d)),
    )
    keys = ad.add(
        ad.matmul(ad.add(item_rows, time_rows), ad.narrow(k_w, d, 2 * d)),
        ad.vecmat(user_vec, ad.narrow(k_w, 0, d)),
    )
    alpha = ad.softmax(ad.matvec(keys, query))
    if dropout_mask is not None:
        alpha = ad.mul(alpha, ad.Tensor(dropout_mask))
    return alpha


def attention_core(user_vec, item_rows, time_rows, attn: AttentionParams, embed_dim: int, dropout_mask=None):
    """One attention block on prepared rows; returns (w, alpha)."""
    alpha = attention_alpha(user_vec, item_rows, time_rows, attn, embed_dim, dropout_mask)
    values = ad.matmul(item_rows, ad.as_tensor(attn.value_w))
    w = ad.relu(ad.vecmat(alpha, values))
    return w, alpha


def stacked_attention_core(user_vec, item_rows, time_rows, blocks, embed_dim: int, dropout_masks=None):
    """Stacked blocks on prepared rows; block k+1 consumes block k's output in
    place of the raw item value vectors (keys stay anchored to the raw rows)."""
    masks = dropout_masks if dropout_masks is not None else [None] * len(blocks)
    w, _ = attention_core(user_vec, item_rows, time_rows, blocks[0], embed_dim, masks[0])
    for attn, mask in zip(blocks[1:], masks[1:]):
        alpha = attention_alpha(user_vec, item_rows, time_rows, attn, embed_dim, mask)
        # every value row is the same vector, so the weighted sum collapses
        # to (sum of weights) * V w; kept in this closed form for speed
        w = ad.relu(ad.mul(ad.vecmat(w, ad.as_tensor(attn.value_w)), ad.tsum(alpha)))
    return w


def attentive_interaction_tape(
    user_vec,
    history: UserHistory,
    item_table,
    omega,
    attn: AttentionParams,
    t: float,
    embed_dim: int,
    max_events: int = HISTORY_MAX_DEFAULT,
    dropout_mask: np.ndarray | None = None,
):
    """One attention block over the user's truncated history; returns (w, alpha).

    ``item_table`` is the raw (|V|, D) item-rows tensor; ``omega`` the
    time-embedding frequencies.  Empty history gives the zero vector and
    alpha None.
    """
    items, times, positions = history.recent(max_events)
    if items.size == 0:
        return ad.Tensor(np.zeros(embed_dim)), None
    if times[-1] >= t:
        raise ValueError(f"history reaches t={times[-1]}, not strictly before query time {t}")
    item_rows = ad.take_rows(item_table, items)
    time_rows = time_embedding_rows_tape(omega, t, times, positions, embed_dim)
    return attention_core(user_vec, item_rows, time_rows, attn, embed_dim, dropout_mask)


def stacked_attention_tape(
    user_vec,
    history: UserHistory,
    item_table,
    omega,
    blocks,
    t: float,
    embed_dim: int,
    max_events: int = HISTORY_MAX_DEFAULT,
    dropout_masks=None,
):
    """Stack attention blocks over a user's truncated history."""
    items, times, positions = history.recent(max_events)
    if items.size == 0:
        return ad.Tensor(np.zeros(embed_dim))
    if times[-1] >= t:
        raise ValueError(f"history reaches t={times[-1]}, not strictly before query time {t}")
    item_rows = ad.take_rows(item_table, items)
    time_rows = time_embedding_rows_tape(omega, t, times, positions, embed_dim)
    return stacked_attention_core(user_vec, item_rows, time_rows, blocks, embed_dim, dropout_masks)


def attentive_interaction(
    user_vec: np.ndarray,
    history: UserHistory,
    item_table: NodeEmbeddingTable,
    time_params: TimeEmbeddingParams,
    attn: AttentionParams,
    t: float,
    max_events: int = HISTORY_MAX_DEFAULT,
) -> np.ndarray:
    """Array-in, array-out single attention block (no dropout)."""
    w, _ = attentive_interaction_tape(
        ad.Tensor(np.asarray(user_vec, dtype=np.float64)),
        history,
        ad.Tensor(item_table.item_rows),
        ad.Tensor(time_params.omega),
        attn,
        t,
        item_table.embed_dim,
        max_events,
    )
    return w.value


def attention_weights(
    user_vec: np.ndarray,
    history: UserHistory,
    item_table: NodeEmbeddingTable,
    time_params: TimeEmbeddingParams,
    attn: AttentionParams,
    t: float,
    max_events: int = HISTORY_MAX_DEFAULT,
) -> np.ndarray | None:
    """The softmax weights alpha for a nonempty history (diagnostics/tests)."""
    _, alpha = attentive_interaction_tape(
        ad.Tensor(np.asarray(user_vec, dtype=np.float64)),
        history,
        ad.Tensor(item_table.item_rows),
        ad.Tensor(time_params.omega),
        attn,
        t,
        item_table.embed_dim,
        max_events,
    )
    return None if alpha is None else alpha.value


# ---------------------------------------------------------------------------
# gated fusion
# ---------------------------------------------------------------------------


def _gru_cell_tape(cell: GruCellParams, state, x, embed_dim: int):
    d = embed_dim
    gx = ad.vecmat(x, ad.as_tensor(cell.w_input))
    gs = ad.vecmat(state, ad.as_tensor(cell.w_state))
    b = ad.as_tensor(cell.bias)
    z = ad.sigmoid(ad.add(ad.add(ad.narrow(gx, 0, d), ad.narrow(gs, 0, d)), ad.narrow(b, 0, d)))
    r = ad.sigmoid(ad.add(ad.add(ad.narrow(gx, d, 2 * d), ad.narrow(gs, d, 2 * d)), ad.narrow(b, d, 2 * d)))
    n = ad.tanh(
        ad.add(
            ad.add(ad.narrow(gx, 2 * d, 3 * d), ad.mul(r, ad.narrow(gs, 2 * d, 3 * d))),
            ad.narrow(b, 2 * d, 3 * d),
        )
    )
    # update gate z interpolates: 0 keeps the state, 1 takes the candidate
    return ad.add(ad.mul(ad.sub(1.0, z), state), ad.mul(z, n))


def gru_cell_rows_tape(cell: GruCellParams, state_rows, x, embed_dim: int):
    """Cell step over a batch of states (k, D) sharing one input vector (D,)."""
    d = embed_dim
    gx = ad.vecmat(x, ad.as_tensor(cell.w_input))  # (3D,) broadcast over rows
    gs = ad.matmul(state_rows, ad.as_tensor(cell.w_state))  # (k, 3D)
    b = ad.as_tensor(cell.bias)
    z = ad.sigmoid(
        ad.add(ad.add(ad.narrow(gs, 0, d, axis=1), ad.narrow(gx, 0, d)), ad.narrow(b, 0, d))
    )
    r = ad.sigmoid(
        ad.add(ad.add(ad.narrow(gs, d, 2 * d, axis=1), ad.narrow(gx, d, 2 * d)), ad.narrow(b, d, 2 * d))
    )
    n = ad.tanh(
        ad.add(
            ad.add(ad.mul(r, ad.narrow(gs, 2 * d, 3 * d, axis=1)), ad.narrow(gx, 2 * d, 3 * d)),
            ad.narrow(b, 2 * d, 3 * d),
        )
    )
    return ad.add(ad.mul(ad.sub(1.0, z), state_rows), ad.mul(z, n))


def gru_fuse_tape(params: GruParams, static_user, static_item, w_t, embed_dim: int):
    u_t = _gru_cell_tape(params.user_cell, static_user, w_t, embed_dim)
    v_t = _gru_cell_tape(params.item_cell, static_item, w_t, embed_dim)
    return u_t, v_t


def gru_fuse(
    params: GruParams, static_user: np.ndarray, static_item: np.ndarray, w_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fuse static embeddings (as cell state) with the interaction vector (as input)."""
    static_user = np.asarray(static_user, dtype=np.float64)
    static_item = np.asarray(static_item, dtype=np.float64)
    w_t = np.asarray(w_t, dtype=np.float64)
    d = static_user.shape[0]
    if static_item.shape[0] != d or w_t.shape[0] != d:
        raise ValueError(f"width mismatch: {static_user.shape}, {static_item.shape}, {w_t.shape}")
    if np.asarray(params.user_cell.w_input).shape[0] != d:
        raise ValueError("cell width does not match embeddings")
    u_t, v_t = gru_fuse_tape(params, ad.Tensor(static_user), ad.Tensor(static_item), ad.Tensor(w_t), d)
    return u_t.value, v_t.value


# ---------------------------------------------------------------------------
# temporal shift
# ---------------------------------------------------------------------------


def temporal_shift_tape(params: ShiftParams, user_emb_t, item_emb_t, user_id: int, item_id: int, t: float, t_plus: float):
    if t_plus < t:
        raise ValueError(f"t_plus={t_plus} precedes t={t}")
    dt = t_plus - t
    u_rate = ad.take_row(ad.as_tensor(params.w_user), user_id)
    v_rate = ad.take_row(ad.as_tensor(params.w_item), item_id)
    u_out = ad.mul(ad.add(1.0, ad.mul(u_rate, dt)), user_emb_t)
    v_out = ad.mul(ad.add(1.0, ad.mul(v_rate, dt)), item_emb_t)
    return u_out, v_out


def temporal_shift(
    params: ShiftParams,
    user_emb_t: np.ndarray,
    item_emb_t: np.ndarray,
    ids: tuple[int, int],
    t: float,
    t_plus: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Project embeddings from t to t_plus: (1 + (t_plus - t) * w_node) elementwise."""
    u, v = temporal_shift_tape(
        params,
        ad.Tensor(np.asarray(user_emb_t, dtype=np.float64)),
        ad.Tensor(np.asarray(item_emb_t, dtype=np.float64)),
        ids[0],
        ids[1],
        t,
        t_plus,
    )
    return u.value, v.value
