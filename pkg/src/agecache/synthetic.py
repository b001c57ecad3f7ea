"""Synthetic request-trace generation.

Produces non-stationary Zipf workloads with learnable structure: items are
partitioned into clusters, every user requests only from their home
cluster, and within a cluster item popularity follows a Zipf law whose
rank assignment can be re-permuted on a schedule (popularity drift). Edge
features carry a noisy one-hot cluster signature plus the item's current
within-cluster popularity weight, so request patterns are recoverable from
the features and a near-perfect predictor exists by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionEvent, Trace

HOUR = 3600.0


@dataclass
class SyntheticConfig:
    seed: int = 0
    n_users: int = 100
    n_items: int = 64
    n_clusters: int = 8
    hours: int = 24
    events_per_hour: int = 500
    zipf_s: float = 1.0
    drift_period_hours: int = 0   # 0 disables periodic drift
    drift_hours: tuple = ()       # explicit extra drift points
    feature_noise: float = 0.1

    def validate(self) -> None:
        if min(self.n_users, self.n_items, self.hours, self.events_per_hour) < 1:
            raise ValueError("users, items, hours and events_per_hour must be >= 1")
        if not 1 <= self.n_clusters <= self.n_items:
            raise ValueError("need 1 <= n_clusters <= n_items")
        if self.zipf_s <= 0:
            raise ValueError("zipf_s must be positive")


def zipf_pmf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate_synthetic_trace(config: SyntheticConfig) -> Trace:
    trace, _ = generate_synthetic_trace_with_popularity(config)
    return trace


def generate_synthetic_trace_with_popularity(config: SyntheticConfig):
    """Build a trace plus the exact per-hour item request distribution.

    Returns (trace, popularity) where popularity[h, k] is the probability
    that a random hour-h event requests item k. Identical seeds give
    identical results.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    clusters = [np.arange(c, config.n_items, config.n_clusters)
                for c in range(config.n_clusters)]
    user_cluster = rng.integers(0, config.n_clusters, size=config.n_users)
    shares = np.bincount(user_cluster, minlength=config.n_clusters) / config.n_users
    pmfs = [zipf_pmf(len(members), config.zipf_s) for members in clusters]
    # rank_of[c][r] is the cluster-local slot holding popularity rank r;
    # drift re-draws these assignments.
    rank_of = [rng.permutation(len(members)) for members in clusters]

    drift_points = set(config.drift_hours)
    if config.drift_period_hours > 0:
        drift_points.update(range(config.drift_period_hours, config.hours,
                                  config.drift_period_hours))

    def hour_popularity() -> np.ndarray:
        pop = np.zeros(config.n_items)
        for c, members in enumerate(clusters):
            pop[members[rank_of[c]]] = shares[c] * pmfs[c]
        return pop

    edge_dim = config.n_clusters + 1
    events = []
    popularity = np.zeros((config.hours, config.n_items))
    for hour in range(config.hours):
        if hour in drift_points:
            rank_of = [rng.permutation(len(members)) for members in clusters]
        popularity[hour] = hour_popularity()
        times = np.sort(rng.uniform(hour * HOUR, (hour + 1) * HOUR,
                                    size=config.events_per_hour))
        users = rng.integers(0, config.n_users, size=config.events_per_hour)
        draws = rng.random(size=config.events_per_hour)
        noise = rng.normal(0.0, config.feature_noise,
                           size=(config.events_per_hour, edge_dim))
        for t, u, draw, eps in zip(times, users, draws, noise):
            c = int(user_cluster[u])
            rank = int(np.searchsorted(np.cumsum(pmfs[c]), draw))
            rank = min(rank, len(clusters[c]) - 1)
            item = int(clusters[c][rank_of[c][rank]])
            feat = np.zeros(edge_dim)
            feat[c] = 1.0
            feat[-1] = pmfs[c][rank]  # current popularity weight of the item
            feat += eps
            events.append(InteractionEvent(int(u), item, float(t), feat))

    trace = Trace(
        events=events,
        n_users=config.n_users,
        n_items=config.n_items,
        edge_dim=edge_dim,
        user_keys=list(range(config.n_users)),
        item_keys=list(range(config.n_items)),
    )
    return trace, popularity
