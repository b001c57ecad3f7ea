"""Interaction traces and the evolving request-graph state.

A trace is an ordered list of timestamped user-item requests with edge
features. This module ingests traces from CSV, splits them chronologically,
and maintains the mutable per-node state the model reads and writes while
replaying events: bounded message buffers, memory vectors, last-request
times, and a temporal neighbor index.

Users and items share one node-id space: users occupy [0, n_users) and
items [n_users, n_users + n_items).
"""

from __future__ import annotations

import bisect
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class MalformedRowError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


@dataclass
class InteractionEvent:
    """One timestamped user-item request."""

    user_id: int
    item_id: int
    timestamp: float
    edge_features: np.ndarray
    label: float = 0.0


@dataclass
class Trace:
    """An ordered request trace plus node-space bookkeeping."""

    events: list
    n_users: int
    n_items: int
    edge_dim: int
    user_keys: list = field(default_factory=list)   # original ids, dense order
    item_keys: list = field(default_factory=list)
    user_features: np.ndarray | None = None         # (n_users, d) or None
    item_features: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def item_node(self, item_id: int) -> int:
        return self.n_users + item_id

    @property
    def timespan(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].timestamp - self.events[0].timestamp

    def summary(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "events": len(self.events),
            "edge_feature_dim": self.edge_dim,
            "t_min": self.events[0].timestamp if self.events else None,
            "t_max": self.events[-1].timestamp if self.events else None,
        }


@dataclass
class CsvSchema:
    """Column layout: user, item, timestamp, optional label, then features."""

    has_label: bool = True


def ingest_csv(path: str, schema: CsvSchema | None = None) -> tuple[Trace, dict]:
    """Load a trace CSV and densely re-index user/item ids.

    Rows are ``user,item,timestamp[,label][,feature...]``; an optional header
    line is detected by a non-numeric timestamp field. Rows out of timestamp
    order are stable-sorted into place and counted as a warning.
    """
    schema = schema or CsvSchema()
    rows = []
    feature_dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if line_no == 1 and _looks_like_header(fields):
                continue
            min_cols = 4 if schema.has_label else 3
            if len(fields) < min_cols:
                raise MalformedRowError(line_no, f"expected at least {min_cols} columns, got {len(fields)}")
            try:
                user_key = fields[0]
                item_key = fields[1]
                ts = float(fields[2])
                label = float(fields[3]) if schema.has_label else 0.0
                feats = [float(f) for f in fields[min_cols:]]
            except ValueError as exc:
                raise MalformedRowError(line_no, str(exc)) from None
            if ts < 0:
                raise MalformedRowError(line_no, f"negative timestamp {ts}")
            if feature_dim is None:
                feature_dim = len(feats)
            elif len(feats) != feature_dim:
                raise MalformedRowError(
                    line_no, f"feature count {len(feats)} != {feature_dim} from first row")
            rows.append((ts, user_key, item_key, label, feats))

    unsorted = sum(1 for a, b in zip(rows, rows[1:]) if b[0] < a[0])
    rows.sort(key=lambda r: r[0])  # stable: ties keep file order

    user_index: dict = {}
    item_index: dict = {}
    events = []
    dim = feature_dim or 0
    for ts, user_key, item_key, label, feats in rows:
        u = user_index.setdefault(user_key, len(user_index))
        i = item_index.setdefault(item_key, len(item_index))
        events.append(InteractionEvent(u, i, ts, np.asarray(feats, dtype=np.float64), label))

    trace = Trace(
        events=events,
        n_users=len(user_index),
        n_items=len(item_index),
        edge_dim=dim,
        user_keys=list(user_index),
        item_keys=list(item_index),
    )
    summary = trace.summary()
    summary["unsorted_rows"] = unsorted
    return trace, summary


def _looks_like_header(fields: list) -> bool:
    if len(fields) < 3:
        return True
    try:
        float(fields[2])
        return False
    except ValueError:
        return True


def write_csv(path: str, trace: Trace) -> None:
    """Write a trace in the same layout ``ingest_csv`` reads."""
    lines = ["user_id,item_id,timestamp,state_label" +
             "".join(f",f{i}" for i in range(trace.edge_dim))]
    for ev in trace.events:
        feats = "".join(f",{v!r}" for v in ev.edge_features.tolist())
        lines.append(f"{ev.user_id},{ev.item_id},{ev.timestamp!r},{ev.label!r}{feats}")
    from .autodiff import atomic_write_text
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---- chronological splitting -------------------------------------------------


@dataclass
class SplitResult:
    train: list
    val: list
    test: list
    new_nodes: frozenset  # node-space ids absent from the training portion

    @property
    def boundaries(self) -> tuple[int, int]:
        return len(self.train), len(self.train) + len(self.val)


def chronological_split(trace: Trace, fractions: tuple) -> SplitResult:
    """Cut the trace at floor(f1*n) and floor((f1+f2)*n) event counts."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(trace.events)
    b1 = int(np.floor(fractions[0] * n))
    b2 = int(np.floor((fractions[0] + fractions[1]) * n))
    train, val, test = trace.events[:b1], trace.events[b1:b2], trace.events[b2:]

    seen = set()
    for ev in train:
        seen.add(ev.user_id)
        seen.add(trace.item_node(ev.item_id))
    fresh = set()
    for ev in val + test:
        for node in (ev.user_id, trace.item_node(ev.item_id)):
            if node not in seen:
                fresh.add(node)
    return SplitResult(train, val, test, frozenset(fresh))


def sample_negatives(n: int, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one uniform item id per positive event."""
    if n_items < 1:
        raise ValueError("item universe is empty")
    return rng.integers(0, n_items, size=n)


# ---- mutable graph state -----------------------------------------------------


@dataclass
class MessageBatch:
    """Fixed-width slab of per-node recent messages, newest-first.

    ``features`` holds the raw message vectors, ``births`` their timestamps,
    and ``keep`` flags real entries (padding slots are zero / False).
    ``ref_time`` is the shared age reference for the batch.
    """

    features: np.ndarray   # (B, N, d)
    births: np.ndarray     # (B, N)
    keep: np.ndarray       # (B, N) bool
    ref_time: float

    def subset(self, row_mask: np.ndarray) -> "MessageBatch":
        return MessageBatch(self.features[row_mask], self.births[row_mask],
                            self.keep[row_mask], self.ref_time)


class MessageBuffer:
    """Per-node bounded history of raw messages, newest entry first."""

    def __init__(self, n_nodes: int, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._entries: list[deque] = [deque(maxlen=capacity) for _ in range(n_nodes)]

    def push(self, node: int, vec: np.ndarray, t: float) -> None:
        self._entries[node].appendleft((vec, t))

    def recent(self, node: int, t: float, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Up to n newest entries strictly older than t, padded to width n."""
        if n < 1:
            raise ValueError("message count must be >= 1")
        feats = np.zeros((n, self.dim))
        births = np.zeros(n)
        keep = np.zeros(n, dtype=bool)
        if 0 <= node < len(self._entries):
            j = 0
            for vec, birth in self._entries[node]:
                if birth >= t:
                    continue
                feats[j] = vec
                births[j] = birth
                keep[j] = True
                j += 1
                if j == n:
                    break
        return feats, births, keep

    def snapshot(self) -> list:
        return [list(d) for d in self._entries]

    def restore(self, snap: list) -> None:
        self._entries = [deque(entries, maxlen=self.capacity) for entries in snap]


class MemoryStore:
    """Per-node memory vectors, initialized to zeros."""

    def __init__(self, n_nodes: int, dim: int):
        self.values = np.zeros((n_nodes, dim))
        self.last_update = np.zeros(n_nodes)

    def snapshot(self) -> tuple:
        return self.values.copy(), self.last_update.copy()

    def restore(self, snap: tuple) -> None:
        values, last_update = snap
        self.values = values.copy()
        self.last_update = last_update.copy()


class TemporalNeighborIndex:
    """Per-node neighbor history ordered by timestamp; queries are strict-past."""

    def __init__(self, n_nodes: int, edge_dim: int):
        self.edge_dim = edge_dim
        self._ts: list[list] = [[] for _ in range(n_nodes)]
        self._nbr: list[list] = [[] for _ in range(n_nodes)]
        self._feat: list[list] = [[] for _ in range(n_nodes)]

    def add(self, node: int, neighbor: int, feat: np.ndarray, t: float) -> None:
        self._ts[node].append(t)
        self._nbr[node].append(neighbor)
        self._feat[node].append(feat)

    def recent(self, node: int, t: float, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Up to k most recent neighbors with timestamp < t, newest first."""
        nbr = np.zeros(k, dtype=np.intp)
        feat = np.zeros((k, self.edge_dim))
        ts = np.zeros(k)
        keep = np.zeros(k, dtype=bool)
        if 0 <= node < len(self._ts):
            end = bisect.bisect_left(self._ts[node], t)
            start = max(0, end - k)
            for j, src in enumerate(range(end - 1, start - 1, -1)):
                nbr[j] = self._nbr[node][src]
                feat[j] = self._feat[node][src]
                ts[j] = self._ts[node][src]
                keep[j] = True
        return nbr, feat, ts, keep

    def snapshot(self) -> tuple:
        return ([list(x) for x in self._ts],
                [list(x) for x in self._nbr],
                [list(x) for x in self._feat])

    def restore(self, snap: tuple) -> None:
        ts, nbr, feat = snap
        self._ts = [list(x) for x in ts]
        self._nbr = [list(x) for x in nbr]
        self._feat = [list(x) for x in feat]


class GraphState:
    """All mutable per-node state built up while replaying a trace."""

    def __init__(self, trace: Trace, memory_dim: int, buffer_size: int):
        self.trace = trace
        self.n_users = trace.n_users
        self.n_nodes = trace.n_nodes
        u_dim = trace.user_features.shape[1] if trace.user_features is not None else 0
        i_dim = trace.item_features.shape[1] if trace.item_features is not None else 0
        self.message_dim = u_dim + i_dim + trace.edge_dim
        self.memory = MemoryStore(self.n_nodes, memory_dim)
        self.buffers = MessageBuffer(self.n_nodes, buffer_size, self.message_dim)
        self.neighbors = TemporalNeighborIndex(self.n_nodes, trace.edge_dim)
        self.last_request = np.zeros(self.n_nodes)
        self.seen = np.zeros(self.n_nodes, dtype=bool)

    def _node_feats(self, ev: InteractionEvent) -> tuple[np.ndarray, np.ndarray]:
        u = (self.trace.user_features[ev.user_id]
             if self.trace.user_features is not None else np.zeros(0))
        i = (self.trace.item_features[ev.item_id]
             if self.trace.item_features is not None else np.zeros(0))
        return u, i

    def insert_event(self, ev: InteractionEvent) -> None:
        """Record a request: both endpoints get a message and a neighbor entry."""
        u_node = ev.user_id
        i_node = self.trace.item_node(ev.item_id)
        fu, fi = self._node_feats(ev)
        msg_user = np.concatenate([fu, fi, ev.edge_features])
        msg_item = np.concatenate([fi, fu, ev.edge_features])
        self.buffers.push(u_node, msg_user, ev.timestamp)
        self.buffers.push(i_node, msg_item, ev.timestamp)
        self.neighbors.add(u_node, i_node, ev.edge_features, ev.timestamp)
        self.neighbors.add(i_node, u_node, ev.edge_features, ev.timestamp)
        self.last_request[u_node] = ev.timestamp
        self.last_request[i_node] = ev.timestamp
        self.seen[u_node] = True
        self.seen[i_node] = True

    def recent_messages(self, node: int, t: float, n: int):
        return self.buffers.recent(node, t, n)

    def message_batch(self, nodes: np.ndarray, query_times: np.ndarray,
                      n: int, ref_time: float) -> MessageBatch:
        feats = np.zeros((len(nodes), n, self.message_dim))
        births = np.zeros((len(nodes), n))
        keep = np.zeros((len(nodes), n), dtype=bool)
        for row, (node, t) in enumerate(zip(nodes, query_times)):
            feats[row], births[row], keep[row] = self.buffers.recent(int(node), float(t), n)
        return MessageBatch(feats, births, keep, ref_time)

    def neighbor_batch(self, nodes: np.ndarray, times: np.ndarray, k: int):
        nbr = np.zeros((len(nodes), k), dtype=np.intp)
        feat = np.zeros((len(nodes), k, self.neighbors.edge_dim))
        ts = np.zeros((len(nodes), k))
        keep = np.zeros((len(nodes), k), dtype=bool)
        for row, (node, t) in enumerate(zip(nodes, times)):
            nbr[row], feat[row], ts[row], keep[row] = self.neighbors.recent(int(node), float(t), k)
        return nbr, feat, ts, keep

    def snapshot(self) -> dict:
        return {
            "memory": self.memory.snapshot(),
            "buffers": self.buffers.snapshot(),
            "neighbors": self.neighbors.snapshot(),
            "last_request": self.last_request.copy(),
            "seen": self.seen.copy(),
        }

    def restore(self, snap: dict) -> None:
        self.memory.restore(snap["memory"])
        self.buffers.restore(snap["buffers"])
        self.neighbors.restore(snap["neighbors"])
        self.last_request = snap["last_request"].copy()
        self.seen = snap["seen"].copy()


# ---- memory snapshot files -----------------------------------------------------

MEMORY_FORMAT = "agecache.memory"
MEMORY_VERSION = 1


def save_memory_snapshot(path: str, state: GraphState, boundary_event_index: int,
                         tag: str = "") -> None:
    """Persist the model-owned part of a GraphState (memory + clocks).

    Buffers and the neighbor index are raw trace data; consumers rebuild
    them by replaying events up to ``boundary_event_index``.
    """
    payload = {
        "format": MEMORY_FORMAT,
        "version": MEMORY_VERSION,
        "tag": tag,
        "boundary_event_index": boundary_event_index,
        "memory": state.memory.values.tolist(),
        "memory_last_update": state.memory.last_update.tolist(),
        "last_request": state.last_request.tolist(),
        "seen": state.seen.astype(int).tolist(),
    }
    from .autodiff import atomic_write_text
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_memory_snapshot(path: str, trace: Trace, memory_dim: int,
                         buffer_size: int) -> tuple[GraphState, int]:
    """Rebuild a full GraphState from a snapshot file plus the trace."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MEMORY_FORMAT:
        raise ValueError(f"not a memory snapshot: {path}")
    if payload.get("version") != MEMORY_VERSION:
        raise ValueError(f"unsupported memory snapshot version {payload.get('version')}")
    boundary = int(payload["boundary_event_index"])
    state = GraphState(trace, memory_dim, buffer_size)
    for ev in trace.events[:boundary]:
        state.insert_event(ev)
    state.memory.values = np.asarray(payload["memory"], dtype=np.float64)
    state.memory.last_update = np.asarray(payload["memory_last_update"], dtype=np.float64)
    state.last_request = np.asarray(payload["last_request"], dtype=np.float64)
    state.seen = np.asarray(payload["seen"], dtype=np.int64).astype(bool)
    if state.memory.values.shape != (trace.n_nodes, memory_dim):
        raise ValueError("memory snapshot does not match trace dimensions")
    return state, boundary
