"""The full popularity model: configuration, parameters, and forward paths.

Composes the time encoder, message aggregator, GRU memory updater,
temporal graph attention, and preference predictor over one ParameterSet,
and provides the batch-level operations the training loop and the cache
simulator drive: update memories of a set of nodes, embed nodes at target
times, and score user-item pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

import numpy as np

from .aggregation import (AGE_MASK_MODES, AGGREGATOR_MODES, GruMemoryUpdater,
                          MessageAggregator)
from .autodiff import ParameterSet, Tensor, concat, select_rows
from .data import GraphState, Trace
from .embedding import PreferencePredictor, TemporalGraphAttention
from .time_encoding import TimeEncoder


@dataclass
class ModelConfig:
    """Model dimensions and variant switches."""

    memory_dim: int = 32
    time_dim: int = 16
    head_dim: int = 16
    heads: int = 3
    ffn_hidden: int = 32
    thresh_hidden: int = 8
    gat_heads: int = 3
    gat_head_dim: int = 16
    embed_dim: int = 32
    predictor_hidden: int = 64
    neighbor_count: int = 10
    buffer_size: int = 10
    aggregator: str = "aoi-attention"
    age_mask_mode: str = "drop-stale"
    attention_activation: str = "identity"
    max_timespan: float = 1.0

    def validate(self) -> None:
        if self.aggregator not in AGGREGATOR_MODES:
            raise ValueError(
                f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATOR_MODES}")
        if self.age_mask_mode not in AGE_MASK_MODES:
            raise ValueError(
                f"unknown age mask mode {self.age_mask_mode!r}; choose from {AGE_MASK_MODES}")
        for name in ("memory_dim", "time_dim", "head_dim", "heads", "ffn_hidden",
                     "thresh_hidden", "gat_heads", "gat_head_dim", "embed_dim",
                     "predictor_hidden", "neighbor_count", "buffer_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


VARIANT_LABELS = {
    "latest": "TGN-L",
    "mean": "TGN-M",
    "attention": "TGN-A",
    "aoi-attention": "TGN-A+AoI",
}


class PopularityModel:
    """Request-probability model over an evolving user-item graph."""

    def __init__(self, config: ModelConfig, edge_dim: int,
                 node_feature_dims: tuple = (0, 0), seed: int = 0):
        config.validate()
        self.config = config
        self.edge_dim = edge_dim
        self.node_feature_dims = tuple(node_feature_dims)
        self.message_dim = edge_dim + sum(node_feature_dims)
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        self.time_encoder = TimeEncoder(self.params, config.time_dim, config.max_timespan)
        self.aggregator = MessageAggregator(
            self.params, config.aggregator, self.time_encoder,
            message_dim=self.message_dim, history_len=config.neighbor_count,
            memory_dim=config.memory_dim, head_dim=config.head_dim,
            n_heads=config.heads, ffn_hidden=config.ffn_hidden,
            thresh_hidden=config.thresh_hidden, rng=rng,
            age_mask_mode=config.age_mask_mode,
            attention_activation=config.attention_activation)
        self.memory_updater = GruMemoryUpdater(
            self.params, self.aggregator.output_dim, config.memory_dim, rng)
        center_dim = config.memory_dim + config.time_dim
        neighbor_dim = config.memory_dim + config.time_dim + edge_dim
        self.graph_attention = TemporalGraphAttention(
            self.params, center_dim, neighbor_dim, config.gat_head_dim,
            config.gat_heads, config.embed_dim, rng)
        self.predictor = PreferencePredictor(
            self.params, config.embed_dim, config.predictor_hidden, rng)

    @property
    def variant_label(self) -> str:
        return VARIANT_LABELS[self.config.aggregator]

    # ---- batch-level forward paths ------------------------------------------

    def update_node_memories(self, state: GraphState, nodes: np.ndarray,
                             query_times: np.ndarray, ref_time: float):
        """Aggregate each node's buffered messages and run the memory gate.

        Nodes with empty buffers are skipped (there is nothing to fold in).
        Returns (new_memory_rows, updated_nodes); new_memory_rows is None
        when no node had history.
        """
        batch = state.message_batch(nodes, query_times, self.config.neighbor_count,
                                    ref_time)
        nonempty = batch.keep.any(axis=1)
        updated = np.asarray(nodes)[nonempty]
        if updated.size == 0:
            return None, updated
        aggregated = self.aggregator.aggregate(batch.subset(nonempty))
        old = Tensor(state.memory.values[updated])
        return self.memory_updater.update(old, aggregated), updated

    def embed_nodes(self, state: GraphState, nodes: np.ndarray,
                    times: np.ndarray, memory_rows: Tensor,
                    neighbor_cache: tuple | None = None) -> Tensor:
        """Embed nodes at per-node target times using the given memory rows.

        Neighbor memories are read from the store as constants; gradients
        flow through the centers' memory rows and the time encoder.
        ``neighbor_cache`` lets callers reuse a gather when the state is
        frozen across repeated target times.
        """
        nodes = np.asarray(nodes)
        times = np.asarray(times, dtype=np.float64)
        dt_last = np.where(state.seen[nodes], times - state.last_request[nodes], 0.0)
        if np.any(dt_last < 0):
            raise ValueError("target time precedes a node's last recorded request")
        center = concat([memory_rows, self.time_encoder.encode(dt_last)], axis=1)

        k = self.config.neighbor_count
        if neighbor_cache is not None:
            nbr, feat, ts, keep = neighbor_cache
        else:
            nbr, feat, ts, keep = state.neighbor_batch(nodes, times, k)
        nbr_mem = np.where(keep[:, :, None], state.memory.values[nbr], 0.0)
        nbr_dt = np.where(keep, times[:, None] - ts, 0.0)
        phi = self.time_encoder.encode(nbr_dt)
        neighbors = concat([Tensor(nbr_mem), phi, Tensor(feat)], axis=2)
        return self.graph_attention.embed(center, neighbors, keep)

    def gather_memory_rows(self, state: GraphState, nodes: np.ndarray,
                           updated_nodes: np.ndarray, updated_memory) -> Tensor:
        """Memory rows for ``nodes``: fresh rows if just updated, else stored."""
        nodes = np.asarray(nodes)
        if updated_memory is None or len(updated_nodes) == 0:
            return Tensor(state.memory.values[nodes])
        position = {int(n): i for i, n in enumerate(updated_nodes)}
        n_updated = len(updated_nodes)
        others = sorted({int(n) for n in nodes if int(n) not in position})
        other_pos = {n: n_updated + i for i, n in enumerate(others)}
        blocks = [updated_memory]
        if others:
            blocks.append(Tensor(state.memory.values[others]))
        combined = concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        index = np.array([position.get(int(n), other_pos.get(int(n), -1)) for n in nodes])
        return select_rows(combined, index)

    def score_pairs(self, user_embed: Tensor, item_embed: Tensor) -> Tensor:
        return self.predictor.score(user_embed, item_embed)

    # ---- persistence ----------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "model": self.config.to_dict(),
            "edge_dim": self.edge_dim,
            "node_feature_dims": list(self.node_feature_dims),
        }

    def save(self, path: str) -> None:
        self.params.save(path, meta=self.checkpoint_meta())

    @classmethod
    def load(cls, path: str, seed: int = 0) -> "PopularityModel":
        meta, arrays = ParameterSet.read_checkpoint(path)
        config = ModelConfig.from_dict(meta["model"])
        model = cls(config, int(meta["edge_dim"]),
                    tuple(meta.get("node_feature_dims", (0, 0))), seed=seed)
        model.params.load_arrays(arrays)
        return model


def build_state(trace: Trace, config: ModelConfig) -> GraphState:
    return GraphState(trace, config.memory_dim, config.buffer_size)
