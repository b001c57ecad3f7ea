"""Trace-driven cache simulation: LRU, LFU, and model-based prediction.

The simulator walks a trace segment hour by hour. LRU and LFU react to
every request; the model policy instead refills its cache at each hour
boundary with the items whose predicted request counts over the coming
hour are largest. Predicted counts come from scoring every candidate
user-item pair at each prediction step inside the hour and counting scores
above a threshold as expected ("fake") requests. Fake requests never touch
the live model state; the model's memory is refreshed with real
interactions only, every ``memory_update_hours`` hours.

All requests are counted identically for every policy: a request is a hit
iff its item is cached at the moment it arrives, and each hour reports
hits / requests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .data import GraphState, InteractionEvent, Trace
from .model import PopularityModel

HOUR = 3600.0


class EmptyCandidateError(ValueError):
    """Prediction was asked to run with no candidate users or items."""


@dataclass
class PredictionWindowConfig:
    step_seconds: float = 6.0
    request_threshold: float = 0.5
    memory_update_hours: int = 1
    candidate_scope: str = "recent-1h"  # all-items | recent-1h | recent-2h
    fake_memory_updates: bool = False
    ingest_batch: int = 200

    def validate(self) -> None:
        if self.step_seconds <= 0:
            raise ValueError("step_seconds must be positive")
        if self.memory_update_hours < 1:
            raise ValueError("memory_update_hours must be >= 1")
        if self.memory_update_hours * HOUR < self.step_seconds:
            raise ValueError("memory update period must cover at least one step")
        if self.candidate_scope not in ("all-items", "recent-1h", "recent-2h"):
            raise ValueError(f"unknown candidate scope {self.candidate_scope!r}")


# ---- core cache structures -----------------------------------------------------


class LruCache:
    """Classic LRU: hits refresh recency, misses evict the coldest entry."""

    name = "lru"
    observer = None

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._recency: dict = {}  # item -> None, oldest first

    @property
    def cached(self) -> set:
        return set(self._recency)

    def begin_hour(self, hour: int, hour_start: float) -> None:
        pass

    def access(self, ev: InteractionEvent) -> bool:
        item = ev.item_id
        if item in self._recency:
            self._recency.pop(item)
            self._recency[item] = None
            return True
        if self.capacity > 0:
            if len(self._recency) >= self.capacity:
                self._recency.pop(next(iter(self._recency)))
            self._recency[item] = None
        return False


class LfuCache:
    """Frequency cache with admission control.

    Every request increments its item's count, cached or not. A missing
    item is admitted only if its count strictly exceeds the weakest cached
    item's (ties keep the incumbent); the victim is the cached item with
    the smallest (count, id).
    """

    name = "lfu"
    observer = None

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.counts: dict = {}
        self.cached: set = set()

    def begin_hour(self, hour: int, hour_start: float) -> None:
        pass

    def access(self, ev: InteractionEvent) -> bool:
        item = ev.item_id
        self.counts[item] = self.counts.get(item, 0) + 1
        if item in self.cached:
            return True
        if self.capacity > 0:
            if len(self.cached) < self.capacity:
                self.cached.add(item)
            else:
                victim = min(self.cached, key=lambda i: (self.counts[i], i))
                if self.counts[item] > self.counts[victim]:
                    self.cached.discard(victim)
                    self.cached.add(item)
        return False


def select_top_c(counts: dict, capacity: int) -> set:
    """The ``capacity`` items with largest counts; ties go to smaller ids."""
    if capacity <= 0:
        return set()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {item for item, _ in ranked[:capacity]}


# ---- prediction ------------------------------------------------------------------


def predict_requests(scorer, users, items, window_start: float,
                     window_seconds: float, step_seconds: float,
                     threshold: float, after_step=None) -> np.ndarray:
    """Count expected requests per candidate item over a prediction window.

    ``scorer(users, items, t)`` returns a (len(users), len(items)) matrix
    of request probabilities as of time t. At each step, every entry above
    ``threshold`` counts as one expected request for its item.
    ``after_step(t, hits)`` sees the boolean hit matrix, e.g. to push fake
    requests into a scratch state.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    if users.size == 0 or items.size == 0:
        raise EmptyCandidateError("prediction needs at least one user and one item")
    counts = np.zeros(items.size, dtype=np.int64)
    n_steps = int(math.ceil(window_seconds / step_seconds))
    for i in range(n_steps):
        t = window_start + i * step_seconds
        if t >= window_start + window_seconds:
            break
        p = np.asarray(scorer(users, items, t))
        hits = p > threshold
        counts += hits.sum(axis=0)
        if after_step is not None:
            after_step(t, hits)
    return counts


def score_matrix(model: PopularityModel, user_embeds: np.ndarray,
                 item_embeds: np.ndarray) -> np.ndarray:
    """All-pairs request probabilities from precomputed embeddings.

    Splits the predictor's first layer across the pair so the hidden
    activations cost O(U + I) matmuls instead of O(U * I).
    """
    e = user_embeds.shape[1]
    w0 = model.predictor.w0.data
    hu = user_embeds @ w0[:e]
    hi = item_embeds @ w0[e:]
    hidden = np.maximum(hu[:, None, :] + hi[None, :, :] + model.predictor.b0.data, 0.0)
    logits = hidden @ model.predictor.w1.data + model.predictor.b1.data
    return 1.0 / (1.0 + np.exp(-logits[..., 0]))


def embed_candidates(model: PopularityModel, state: GraphState, trace: Trace,
                     users: np.ndarray, items: np.ndarray, t: float,
                     neighbor_cache=None):
    """Embed candidate users and items at time t from a frozen state."""
    nodes = np.concatenate([users, trace.n_users + items])
    times = np.full(nodes.size, t)
    with no_grad():
        mem = Tensor(state.memory.values[nodes])
        embeds = model.embed_nodes(state, nodes, times, mem,
                                   neighbor_cache=neighbor_cache).data
    return embeds[:users.size], embeds[users.size:]


def make_model_scorer(model: PopularityModel, state: GraphState, trace: Trace):
    """Per-call scorer over a (possibly mutating) state; no gather reuse."""

    def scorer(users, items, t):
        eu, ei = embed_candidates(model, state, trace,
                                  np.asarray(users), np.asarray(items), t)
        return score_matrix(model, eu, ei)

    return scorer


def ingest_events(model: PopularityModel, state: GraphState, trace: Trace,
                  events: list, batch_size: int = 200) -> None:
    """Fold real events into the state: memory updates plus bookkeeping."""
    with no_grad():
        for start in range(0, len(events), batch_size):
            batch = events[start:start + batch_size]
            nodes = []
            first_time: dict = {}
            for ev in batch:
                for node in (ev.user_id, trace.item_node(ev.item_id)):
                    if node not in first_time:
                        first_time[node] = ev.timestamp
                        nodes.append(node)
            nodes = np.array(sorted(nodes), dtype=np.intp)
            query_times = np.array([first_time[int(n)] for n in nodes])
            ref_time = float(batch[-1].timestamp)
            new_memory, updated = model.update_node_memories(
                state, nodes, query_times, ref_time)
            if new_memory is not None:
                state.memory.values[updated] = new_memory.data
                state.memory.last_update[updated] = ref_time
            for ev in batch:
                state.insert_event(ev)


class HourlyModelPredictor:
    """Shared per-hour prediction engine for one or more model policies.

    Owns a private GraphState. Real events are queued as they arrive and
    folded into the state only at memory-refresh boundaries; predictions
    inside an hour therefore come from a frozen snapshot (optionally a
    scratch copy that absorbs fake requests when ``fake_memory_updates``
    is on; the live state is never touched by prediction).
    """

    def __init__(self, model: PopularityModel, state: GraphState, trace: Trace,
                 window: PredictionWindowConfig, warmup_events: list = ()):
        window.validate()
        self.model = model
        self.state = state
        self.trace = trace
        self.window = window
        self._recent: list = list(warmup_events)
        self._pending: list = []
        self._counts: dict | None = None
        self._hour_start = 0.0
        self._hour = -1

    def begin_hour(self, hour: int, hour_start: float) -> None:
        if hour > 0 and hour % self.window.memory_update_hours == 0 and self._pending:
            ingest_events(self.model, self.state, self.trace, self._pending,
                          self.window.ingest_batch)
            self._pending = []
        self._hour = hour
        self._hour_start = hour_start
        self._counts = None

    def observe(self, ev: InteractionEvent) -> None:
        self._recent.append(ev)
        self._pending.append(ev)

    def _candidates(self):
        if self.window.candidate_scope == "all-items":
            return (np.arange(self.trace.n_users, dtype=np.intp),
                    np.arange(self.trace.n_items, dtype=np.intp))
        lookback = HOUR if self.window.candidate_scope == "recent-1h" else 2 * HOUR
        cutoff = self._hour_start - lookback
        self._recent = [ev for ev in self._recent if ev.timestamp >= cutoff]
        users = sorted({ev.user_id for ev in self._recent})
        items = sorted({ev.item_id for ev in self._recent})
        return (np.asarray(users, dtype=np.intp), np.asarray(items, dtype=np.intp))

    def counts(self) -> dict:
        """Predicted request counts per item for the current hour (memoized)."""
        if self._counts is not None:
            return self._counts
        users, items = self._candidates()
        if users.size == 0 or items.size == 0:
            self._counts = {}
            return self._counts
        if self.window.fake_memory_updates:
            arr = self._counts_with_fake_updates(users, items)
        else:
            arr = self._counts_frozen(users, items)
        self._counts = {int(item): int(c) for item, c in zip(items, arr)}
        return self._counts

    def _counts_frozen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        nodes = np.concatenate([users, self.trace.n_users + items])
        cache = self.state.neighbor_batch(
            nodes, np.full(nodes.size, self._hour_start),
            self.model.config.neighbor_count)

        def scorer(u, i, t):
            eu, ei = embed_candidates(self.model, self.state, self.trace,
                                      users, items, t, neighbor_cache=cache)
            return score_matrix(self.model, eu, ei)

        return predict_requests(scorer, users, items, self._hour_start, HOUR,
                                self.window.step_seconds,
                                self.window.request_threshold)

    def _counts_with_fake_updates(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        scratch = GraphState(self.trace, self.model.config.memory_dim,
                             self.model.config.buffer_size)
        scratch.restore(self.state.snapshot())
        scorer = make_model_scorer(self.model, scratch, self.trace)
        edge_dim = self.trace.edge_dim

        def after_step(t, hits):
            fakes = [InteractionEvent(int(users[r]), int(items[c]), t, np.zeros(edge_dim))
                     for r, c in np.argwhere(hits)]
            if fakes:
                ingest_events(self.model, scratch, self.trace, fakes,
                              self.window.ingest_batch)

        return predict_requests(scorer, users, items, self._hour_start, HOUR,
                                self.window.step_seconds,
                                self.window.request_threshold, after_step)


class ModelCachePolicy:
    """Caches the top-C items by predicted request count, refreshed hourly."""

    def __init__(self, predictor: HourlyModelPredictor, capacity: int,
                 name: str = "model"):
        self.name = name
        self.capacity = capacity
        self.observer = predictor
        self.cached: set = set()

    def begin_hour(self, hour: int, hour_start: float) -> None:
        self.cached = select_top_c(self.observer.counts(), self.capacity)

    def access(self, ev: InteractionEvent) -> bool:
        return ev.item_id in self.cached


# ---- the simulator ------------------------------------------------------------------


@dataclass
class PolicyResult:
    name: str
    capacity: int
    hours: list = field(default_factory=list)      # hour indices with traffic
    requests: list = field(default_factory=list)
    hits: list = field(default_factory=list)

    def hit_rates(self) -> list:
        return [h / r for h, r in zip(self.hits, self.requests)]

    @property
    def overall(self) -> float:
        total = sum(self.requests)
        return sum(self.hits) / total if total else 0.0

    def overall_from(self, first_hour: int) -> float:
        """Pooled hit rate ignoring warm-up hours before ``first_hour``."""
        pairs = [(h, r) for hr, h, r in zip(self.hours, self.hits, self.requests)
                 if hr >= first_hour]
        total = sum(r for _, r in pairs)
        return sum(h for h, _ in pairs) / total if total else 0.0

    @property
    def mean_hourly(self) -> float:
        rates = self.hit_rates()
        return float(np.mean(rates)) if rates else 0.0

    def to_dict(self) -> dict:
        return {
            "policy": self.name,
            "cache_size": self.capacity,
            "hours": list(self.hours),
            "requests": list(self.requests),
            "hits": list(self.hits),
            "hit_rates": self.hit_rates(),
            "overall": self.overall,
            "overall_warm": self.overall_from(1),
            "mean_hourly": self.mean_hourly,
        }


def simulate(events: list, policies: list, t0: float | None = None) -> list:
    """Drive every policy over one pass of the trace segment.

    Hour boundaries are aligned to t0 (default: the floor hour of the
    first event). Observers shared between policies are advanced exactly
    once per hour and see each event exactly once, after all policies have
    served it.
    """
    if not events:
        return [PolicyResult(p.name, getattr(p, "capacity", 0)) for p in policies]
    if t0 is None:
        t0 = math.floor(events[0].timestamp / HOUR) * HOUR
    observers = []
    for p in policies:
        ob = getattr(p, "observer", None)
        if ob is not None and all(ob is not o for o in observers):
            observers.append(ob)

    results = [PolicyResult(p.name, getattr(p, "capacity", 0)) for p in policies]
    tallies = [dict() for _ in policies]  # hour -> [requests, hits]
    current_hour = -1
    for ev in events:
        hour = int((ev.timestamp - t0) // HOUR)
        while current_hour < hour:
            current_hour += 1
            start = t0 + current_hour * HOUR
            for ob in observers:
                ob.begin_hour(current_hour, start)
            for p in policies:
                p.begin_hour(current_hour, start)
        for p, tally in zip(policies, tallies):
            hit = p.access(ev)
            cell = tally.setdefault(current_hour, [0, 0])
            cell[0] += 1
            cell[1] += int(hit)
        for ob in observers:
            ob.observe(ev)

    for result, tally in zip(results, tallies):
        for hour in sorted(tally):
            requests, hits = tally[hour]
            result.hours.append(hour)
            result.requests.append(requests)
            result.hits.append(hits)
    return results


def run_policy(events: list, policy, t0: float | None = None) -> PolicyResult:
    return simulate(events, [policy], t0=t0)[0]
