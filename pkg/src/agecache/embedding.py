"""Final node embeddings and preference scoring.

A node's embedding at a target time combines its memory with a time
encoding of "how long since this node last interacted", then attends over
its most recent graph neighbors (each neighbor contributes its memory, the
encoded time since that edge, and the edge features). Nodes with no
neighbors yet fall back to a plain linear projection of their own state.

A two-layer MLP turns a (user, item) embedding pair into a request
probability, trained with binary cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterSet, Tensor, concat, masked_softmax


@dataclass
class ClampCounter:
    """Counts predictions that had to be clamped away from exactly 0 or 1."""

    count: int = 0


class TemporalGraphAttention:
    """Multi-head attention of a node over its recent temporal neighbors."""

    def __init__(self, params: ParameterSet, center_dim: int, neighbor_dim: int,
                 head_dim: int, n_heads: int, out_dim: int,
                 rng: np.random.Generator, prefix: str = "graph_attn"):
        if n_heads < 1:
            raise ValueError("need at least one attention head")
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.heads = []
        for h in range(n_heads):
            self.heads.append((
                params.uniform(f"{prefix}.h{h}.wq", (neighbor_dim, head_dim), rng),
                params.uniform(f"{prefix}.h{h}.wk", (center_dim, head_dim), rng),
                params.uniform(f"{prefix}.h{h}.wv", (neighbor_dim, head_dim), rng),
            ))
        self.w_out = params.uniform(f"{prefix}.w_out", (n_heads * head_dim, out_dim), rng)
        self.b_out = params.zeros(f"{prefix}.b_out", (out_dim,))
        self.w_self = params.uniform(f"{prefix}.w_self", (center_dim, out_dim), rng)

    def embed(self, center: Tensor, neighbors: Tensor, keep: np.ndarray,
              return_weights: bool = False):
        """center (B, c), neighbors (B, K, g), keep (B, K) -> (B, out_dim).

        Rows with no kept neighbors take the self-projection path; the
        attention result for those rows is masked to zero, so the dummy
        slot used to keep the softmax well-defined never contributes.
        """
        b, k, _ = neighbors.shape
        has_nbr = keep.any(axis=1)
        keep_safe = keep.copy()
        keep_safe[~has_nbr, 0] = True
        outputs = []
        weights = []
        for wq, wk_, wv in self.heads:
            q = neighbors @ wq                                  # (B, K, dh)
            key = center @ wk_                                  # (B, dh)
            scores = (q * key.reshape((b, 1, self.head_dim))).sum(axis=2)
            alpha = masked_softmax(scores, keep_safe)
            v = neighbors @ wv
            outputs.append((v * alpha.reshape((b, k, 1))).sum(axis=1))
            if return_weights:
                weights.append(alpha.data.copy())
        attended = concat(outputs, axis=1) @ self.w_out + self.b_out
        sel = has_nbr.astype(np.float64)[:, None]
        out = attended.mask(sel) + (center @ self.w_self).mask(1.0 - sel)
        return (out, weights) if return_weights else out


class PreferencePredictor:
    """Two-layer MLP scoring a (user, item) embedding pair into (0, 1)."""

    def __init__(self, params: ParameterSet, embed_dim: int, hidden_dim: int,
                 rng: np.random.Generator, prefix: str = "predictor"):
        self.w0 = params.uniform(f"{prefix}.w0", (2 * embed_dim, hidden_dim), rng)
        self.b0 = params.zeros(f"{prefix}.b0", (hidden_dim,))
        self.w1 = params.uniform(f"{prefix}.w1", (hidden_dim, 1), rng)
        self.b1 = params.zeros(f"{prefix}.b1", (1,))

    def score(self, user_embed: Tensor, item_embed: Tensor) -> Tensor:
        """(B, e) x (B, e) -> (B,) request probabilities."""
        x = concat([user_embed, item_embed], axis=1)
        logits = (x @ self.w0 + self.b0).relu() @ self.w1 + self.b1
        return logits.sigmoid().reshape((x.shape[0],))


BCE_EPS = 1e-12


def bce_loss(predictions: Tensor, labels, counter: ClampCounter | None = None) -> Tensor:
    """Mean binary cross entropy with a numerical guard.

    Predictions outside the open interval (0, 1) are clamped to
    [BCE_EPS, 1 - BCE_EPS] and counted, since an exact 0 or 1 would make
    the log diverge.
    """
    y = np.asarray(labels, dtype=np.float64)
    if predictions.shape != y.shape:
        raise ValueError(f"predictions {predictions.shape} vs labels {y.shape}")
    if counter is not None:
        counter.count += int(((predictions.data <= 0.0) | (predictions.data >= 1.0)).sum())
    p = predictions.clip(BCE_EPS, 1.0 - BCE_EPS)
    term = Tensor(y) * p.log() + Tensor(1.0 - y) * (1.0 - p).log()
    return -term.mean()
