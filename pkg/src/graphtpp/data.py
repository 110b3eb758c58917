"""Interaction dataset parsing, validation, splitting, and canonical text output.

The on-disk inputs are JODIE-style CSVs (header line; columns user_id,
item_id, timestamp, extras ignored).  Internally a stream is three parallel
numpy arrays plus vocabulary sizes and a time horizon; original ids are
remapped to dense 0..n-1 indices in first-appearance order.

The canonical output format is one event per line, `<user> <item> <time>`,
timestamps at 9 significant digits, preceded by a single comment line that
records the vocabulary sizes (needed so a serialized split keeps the shared
vocabulary of its parent stream).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

# pushes horizon_T just past the last event so it lies strictly inside (0, T]
HORIZON_SLACK = 1e-9


class InteractionEvent(NamedTuple):
    user_id: int
    item_id: int
    timestamp: float


@dataclass(eq=False)
class EventStream:
    """A chronologically sorted user-item interaction sequence."""

    user_ids: np.ndarray  # intp, shape (n,)
    item_ids: np.ndarray  # intp, shape (n,)
    timestamps: np.ndarray  # float64, shape (n,), non-decreasing
    num_users: int
    num_items: int
    horizon_T: float

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    def __iter__(self) -> Iterator[InteractionEvent]:
        for u, v, t in zip(self.user_ids, self.item_ids, self.timestamps):
            yield InteractionEvent(int(u), int(v), float(t))

    def __getitem__(self, i: int) -> InteractionEvent:
        return InteractionEvent(int(self.user_ids[i]), int(self.item_ids[i]), float(self.timestamps[i]))

    @property
    def events(self) -> list[InteractionEvent]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.horizon_T == other.horizon_T
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.timestamps, other.timestamps)
        )


def _sorted_stream(users, items, times, num_users: int, num_items: int) -> EventStream:
    u = np.asarray(users, dtype=np.intp)
    v = np.asarray(items, dtype=np.intp)
    t = np.asarray(times, dtype=np.float64)
    order = np.argsort(t, kind="stable")  # stable: file order breaks timestamp ties
    u, v, t = u[order], v[order], t[order]
    horizon = float(t[-1]) * (1.0 + HORIZON_SLACK) if t.size else 0.0
    return EventStream(u, v, t, num_users, num_items, horizon)


def parse_jodie_csv(path) -> EventStream:
    """Parse a JODIE-style CSV into an EventStream with dense ids.

    Original user/item ids (arbitrary strings) are mapped to 0..n-1 in order
    of first appearance.  Rows may arrive with non-monotone timestamps; they
    are stable-sorted and a warning reports how many adjacent descents were
    seen in file order.
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    times: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                continue  # header
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise ValueError(f"{path}: line {lineno}: expected at least 3 columns, got {len(row)}")
            u_raw, v_raw, t_raw = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                t = float(t_raw)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad timestamp {t_raw!r}") from None
            if not math.isfinite(t) or t < 0.0:
                raise ValueError(f"{path}: line {lineno}: timestamp must be finite and >= 0, got {t_raw}")
            users.append(user_index.setdefault(u_raw, len(user_index)))
            items.append(item_index.setdefault(v_raw, len(item_index)))
            times.append(t)
    t_arr = np.asarray(times)
    descents = int(np.sum(t_arr[1:] < t_arr[:-1])) if t_arr.size > 1 else 0
    if descents:
        warnings.warn(f"{path}: {descents} out-of-order timestamp pair(s); events were re-sorted", stacklevel=2)
    return _sorted_stream(users, items, times, len(user_index), len(item_index))


def serialize_canonical(stream: EventStream, path) -> None:
    """Write the canonical text form: header comment, then one event per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# users={stream.num_users} items={stream.num_items}\n")
        for u, v, t in zip(stream.user_ids, stream.item_ids, stream.timestamps):
            fh.write(f"{u} {v} {t:.9g}\n")


def read_canonical(path) -> EventStream:
    """Read a canonical event file; ids are taken verbatim (already dense)."""
    num_users = num_items = None
    users: list[int] = []
    items: list[int] = []
    times: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("users="):
                        num_users = int(tok[6:])
                    elif tok.startswith("items="):
                        num_items = int(tok[6:])
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 'user item time', got {line!r}")
            try:
                u, v, t = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad field in {line!r}") from None
            if u < 0 or v < 0 or not math.isfinite(t) or t < 0.0:
                raise ValueError(f"{path}: line {lineno}: ids must be >= 0 and time finite >= 0")
            users.append(u)
            items.append(v)
            times.append(t)
    if num_users is None:
        num_users = max(users) + 1 if users else 0
    if num_items is None:
        num_items = max(items) + 1 if items else 0
    return _sorted_stream(users, items, times, num_users, num_items)


def chronological_split(stream: EventStream, train_frac: float, valid_frac: float):
    """Split a stream by event count at chronological boundaries.

    All three splits share the parent vocabulary sizes; each gets a horizon
    derived from its own last timestamp.
    """
    if not (0.0 < train_frac and 0.0 <= valid_frac and train_frac + valid_frac < 1.0):
        raise ValueError(f"bad split fractions: train={train_frac}, valid={valid_frac}")
    n = len(stream)
    n_train = int(n * train_frac + 1e-9)
    n_valid = int(n * valid_frac + 1e-9)

    def piece(lo: int, hi: int) -> EventStream:
        t = stream.timestamps[lo:hi].copy()
        horizon = float(t[-1]) * (1.0 + HORIZON_SLACK) if t.size else 0.0
        return EventStream(
            stream.user_ids[lo:hi].copy(),
            stream.item_ids[lo:hi].copy(),
            t,
            stream.num_users,
            stream.num_items,
            horizon,
        )

    return piece(0, n_train), piece(n_train, n_train + n_valid), piece(n_train + n_valid, n)
