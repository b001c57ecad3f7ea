"""Message aggregation and memory updates.

Turns a node's recent raw messages into one vector and folds it into the
node's memory. Four aggregators are supported:

* ``latest``        - keep the newest message only
* ``mean``          - average all buffered messages
* ``attention``     - multi-head self-attention keyed on the newest message,
                      followed by a skip-connection feed-forward block
* ``aoi-attention`` - same, but messages are first passed through an
                      age-based filter: a small MLP maps the message ages to
                      a staleness threshold, a steep sigmoid soft-masks the
                      raw timestamps around that threshold, and messages
                      voted out are excluded from attention entirely.

All aggregators share the same GRU-style memory updater.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (AllMaskedError, ParameterSet, Tensor, concat,
                       masked_softmax, select_rows)
from .data import MessageBatch
from .time_encoding import TimeEncoder

AGGREGATOR_MODES = ("latest", "mean", "attention", "aoi-attention")
AGE_MASK_MODES = ("drop-stale", "drop-fresh")

MASK_SHARPNESS = 100.0
DROP_CUTOFF = 0.5  # sigmoid vote below this excludes a message from attention


class BirthAfterReferenceError(ValueError):
    """A message claims to be born after the age reference time."""


def compute_ages(batch: MessageBatch) -> np.ndarray:
    """Age of every message relative to the batch reference time.

    Padded slots get +inf so downstream code can never mistake them for
    real history.
    """
    ages = batch.ref_time - batch.births
    if np.any((ages < 0) & batch.keep):
        raise BirthAfterReferenceError(
            f"message born after reference time {batch.ref_time}")
    return np.where(batch.keep, ages, np.inf)


class StalenessThresholdNet:
    """Two-layer MLP mapping an age vector to a non-negative threshold."""

    def __init__(self, params: ParameterSet, history_len: int, hidden_dim: int,
                 rng: np.random.Generator, prefix: str = "age_filter"):
        self.history_len = history_len
        self.w1 = params.uniform(f"{prefix}.w1", (history_len, hidden_dim), rng)
        self.b1 = params.zeros(f"{prefix}.b1", (hidden_dim,))
        self.w2 = params.uniform(f"{prefix}.w2", (hidden_dim, 1), rng)
        self.b2 = params.zeros(f"{prefix}.b2", (1,))

    def threshold(self, ages) -> Tensor:
        """(B, N) padded age rows -> (B, 1) ReLU threshold."""
        a = ages if isinstance(ages, Tensor) else Tensor(ages)
        if a.ndim != 2 or a.shape[1] != self.history_len:
            raise ValueError(
                f"age vector must be (batch, {self.history_len}), got {a.shape}")
        hidden = (a @ self.w1 + self.b1).relu()
        return (hidden @ self.w2 + self.b2).relu()


def soft_mask(births: np.ndarray, ages: np.ndarray, threshold: Tensor,
              keep: np.ndarray, mode: str = "drop-stale"):
    """Rescale raw timestamps by a steep sigmoid vote around the threshold.

    Returns (adjusted_times, survivors, multiplier). ``drop-stale`` keeps
    messages younger than the threshold; ``drop-fresh`` is the mirrored
    orientation. The newest message (column 0) always survives, and padded
    slots never do.
    """
    if mode not in AGE_MASK_MODES:
        raise ValueError(f"unknown age mask mode {mode!r}; choose from {AGE_MASK_MODES}")
    ages_t = Tensor(np.where(keep, ages, 0.0))
    signal = (threshold - ages_t) if mode == "drop-stale" else (ages_t - threshold)
    multiplier = (signal * MASK_SHARPNESS).sigmoid()
    adjusted = multiplier * Tensor(births)
    survivors = keep & (multiplier.data >= DROP_CUTOFF)
    survivors[:, 0] = keep[:, 0]
    return adjusted, survivors, multiplier


class MultiHeadMessageAttention:
    """Self-attention over a node's messages, queried by the newest one."""

    def __init__(self, params: ParameterSet, msg_dim: int, head_dim: int,
                 n_heads: int, rng: np.random.Generator,
                 activation: str = "identity", prefix: str = "msg_attn"):
        if n_heads < 1:
            raise ValueError("need at least one attention head")
        if activation not in ("identity", "sigmoid"):
            raise ValueError(f"unknown attention activation {activation!r}")
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.activation = activation
        self.heads = []
        for h in range(n_heads):
            self.heads.append((
                params.uniform(f"{prefix}.h{h}.wq", (msg_dim, head_dim), rng),
                params.uniform(f"{prefix}.h{h}.wk", (msg_dim, head_dim), rng),
                params.uniform(f"{prefix}.h{h}.wv", (msg_dim, head_dim), rng),
            ))

    def aggregate(self, messages: Tensor, keep: np.ndarray,
                  return_weights: bool = False):
        """(B, N, m) messages -> (B, heads*head_dim) concatenated head outputs."""
        b, n, m = messages.shape
        newest = select_rows(messages.reshape((b * n, m)), np.arange(b) * n)
        outputs = []
        weights = []
        for wq, wk, wv in self.heads:
            q = newest @ wq                                   # (B, dh)
            k = messages @ wk                                 # (B, N, dh)
            scores = (k * q.reshape((b, 1, self.head_dim))).sum(axis=2)
            alpha = masked_softmax(scores, keep)              # (B, N)
            v = messages @ wv
            head = (v * alpha.reshape((b, n, 1))).sum(axis=1)
            if self.activation == "sigmoid":
                head = head.sigmoid()
            outputs.append(head)
            if return_weights:
                weights.append(alpha.data.copy())
        out = concat(outputs, axis=1)
        return (out, weights) if return_weights else out


class SkipFeedForward:
    """Two-layer ReLU block applied to attention output plus the raw newest message."""

    def __init__(self, params: ParameterSet, in_dim: int, hidden_dim: int,
                 out_dim: int, rng: np.random.Generator, prefix: str = "msg_ffn"):
        self.w0 = params.uniform(f"{prefix}.w0", (in_dim, hidden_dim), rng)
        self.b0 = params.zeros(f"{prefix}.b0", (hidden_dim,))
        self.w1 = params.uniform(f"{prefix}.w1", (hidden_dim, out_dim), rng)
        self.b1 = params.zeros(f"{prefix}.b1", (out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w0 + self.b0).relu() @ self.w1 + self.b1


class GruMemoryUpdater:
    """Gated memory update: new = Z*candidate + (1-Z)*old."""

    def __init__(self, params: ParameterSet, input_dim: int, memory_dim: int,
                 rng: np.random.Generator, prefix: str = "memory_gru"):
        u = params.uniform
        self.w_hz = u(f"{prefix}.w_hz", (input_dim, memory_dim), rng)
        self.w_mz = u(f"{prefix}.w_mz", (memory_dim, memory_dim), rng)
        self.b_z = params.zeros(f"{prefix}.b_z", (memory_dim,))
        self.w_hf = u(f"{prefix}.w_hf", (input_dim, memory_dim), rng)
        self.w_mf = u(f"{prefix}.w_mf", (memory_dim, memory_dim), rng)
        self.b_f = params.zeros(f"{prefix}.b_f", (memory_dim,))
        self.w_hh = u(f"{prefix}.w_hh", (input_dim, memory_dim), rng)
        self.w_mh = u(f"{prefix}.w_mh", (memory_dim, memory_dim), rng)
        self.b_h = params.zeros(f"{prefix}.b_h", (memory_dim,))

    def update(self, memory, aggregated) -> Tensor:
        mem = memory if isinstance(memory, Tensor) else Tensor(memory)
        x = aggregated
        if mem.shape[0] != x.shape[0]:
            raise ValueError(f"memory rows {mem.shape} do not match input rows {x.shape}")
        update_gate = (x @ self.w_hz + mem @ self.w_mz + self.b_z).sigmoid()
        reset_gate = (x @ self.w_hf + mem @ self.w_mf + self.b_f).sigmoid()
        candidate = (x @ self.w_hh + (reset_gate * mem) @ self.w_mh + self.b_h).tanh()
        return update_gate * candidate + (1.0 - update_gate) * mem


class MessageAggregator:
    """Dispatches one of the four aggregation strategies over a MessageBatch."""

    def __init__(self, params: ParameterSet, mode: str, time_encoder: TimeEncoder,
                 message_dim: int, history_len: int, memory_dim: int,
                 head_dim: int, n_heads: int, ffn_hidden: int, thresh_hidden: int,
                 rng: np.random.Generator, age_mask_mode: str = "drop-stale",
                 attention_activation: str = "identity"):
        if mode not in AGGREGATOR_MODES:
            raise ValueError(f"unknown aggregator {mode!r}; choose from {AGGREGATOR_MODES}")
        self.mode = mode
        self.encoder = time_encoder
        self.message_dim = message_dim
        self.history_len = history_len
        self.age_mask_mode = age_mask_mode
        full_dim = message_dim + time_encoder.dim
        if mode in ("latest", "mean"):
            self.output_dim = full_dim
            self.threshold_net = None
            self.attention = None
            self.ffn = None
        else:
            self.output_dim = memory_dim
            self.attention = MultiHeadMessageAttention(
                params, full_dim, head_dim, n_heads, rng,
                activation=attention_activation)
            self.ffn = SkipFeedForward(
                params, n_heads * head_dim + message_dim, ffn_hidden, memory_dim, rng)
            self.threshold_net = (
                StalenessThresholdNet(params, history_len, thresh_hidden, rng)
                if mode == "aoi-attention" else None)

    def aggregate(self, batch: MessageBatch) -> Tensor:
        """(B, N, d) raw messages -> (B, output_dim); every row needs history."""
        if not batch.keep.any(axis=1).all():
            raise AllMaskedError("aggregate: a node has no messages to aggregate")
        if self.mode == "latest":
            return self._latest(batch)
        if self.mode == "mean":
            return self._mean(batch)
        return self._attention(batch)

    def _encode_rows(self, batch: MessageBatch, times) -> Tensor:
        """Concatenate raw features with the time encoding of ref_time - t."""
        dt = batch.ref_time - (times if isinstance(times, Tensor) else Tensor(times))
        phi = self.encoder.encode(dt)
        return concat([Tensor(batch.features), phi], axis=2)

    def _latest(self, batch: MessageBatch) -> Tensor:
        dt = batch.ref_time - batch.births[:, 0]
        phi = self.encoder.encode(dt)
        return concat([Tensor(batch.features[:, 0, :]), phi], axis=1)

    def _mean(self, batch: MessageBatch) -> Tensor:
        rows = self._encode_rows(batch, np.where(batch.keep, batch.births, batch.ref_time))
        kept = rows.mask(batch.keep[:, :, None].astype(np.float64))
        counts = batch.keep.sum(axis=1, keepdims=True).astype(np.float64)
        return kept.sum(axis=1) * Tensor(1.0 / counts)

    def _attention(self, batch: MessageBatch) -> Tensor:
        if self.mode == "aoi-attention":
            ages = compute_ages(batch)
            finite_ages = np.where(batch.keep, ages, 0.0)
            thresh = self.threshold_net.threshold(finite_ages)
            adjusted, survivors, _ = soft_mask(
                batch.births, finite_ages, thresh, batch.keep, self.age_mask_mode)
            rows = self._encode_rows(batch, adjusted)
            keep = survivors
        else:
            safe_births = np.where(batch.keep, batch.births, batch.ref_time)
            rows = self._encode_rows(batch, safe_births)
            keep = batch.keep
        heads = self.attention.aggregate(rows, keep)
        newest_raw = Tensor(batch.features[:, 0, :])
        return self.ffn(concat([heads, newest_raw], axis=1))
