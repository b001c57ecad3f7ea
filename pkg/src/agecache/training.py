"""Training and evaluation over chronological batches.

Each batch is processed in event order: sample one negative item per
positive event, update the memories of every node touched by the batch
from its buffered messages, embed users / positive items / negative items
at the event timestamps, score both pair sets, and (when training) take an
Adam step on the binary cross entropy. Only afterwards do the batch's
events enter the buffers and the neighbor index, so a prediction never
sees its own event.

Model selection is early stopping on validation AP among training-seen
nodes; the graph state at the end of the best validation pass is what test
evaluation (and the cache simulator) start from.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Adam, no_grad
from .data import GraphState, SplitResult, Trace, sample_negatives
from .embedding import ClampCounter, bce_loss
from .metrics import auc as auc_metric
from .metrics import average_precision
from .model import ModelConfig, PopularityModel, build_state

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, batch_index: int):
        super().__init__(f"loss became non-finite at batch {batch_index}")
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    """Flat training configuration; model dimensions ride along."""

    batch_size: int = 200
    learning_rate: float = 1e-4
    epochs: int = 5
    patience: int = 5
    seed: int = 0
    fractions: tuple = (0.7, 0.15, 0.15)
    aggregator: str = "aoi-attention"
    age_mask_mode: str = "drop-stale"
    attention_activation: str = "identity"
    neighbor_count: int = 10
    buffer_size: int = 10
    heads: int = 3
    memory_dim: int = 32
    time_dim: int = 16
    head_dim: int = 16
    ffn_hidden: int = 32
    thresh_hidden: int = 8
    gat_heads: int = 3
    gat_head_dim: int = 16
    embed_dim: int = 32
    predictor_hidden: int = 64

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.model_config().validate()

    def model_config(self, max_timespan: float = 1.0) -> ModelConfig:
        return ModelConfig(
            memory_dim=self.memory_dim, time_dim=self.time_dim,
            head_dim=self.head_dim, heads=self.heads, ffn_hidden=self.ffn_hidden,
            thresh_hidden=self.thresh_hidden, gat_heads=self.gat_heads,
            gat_head_dim=self.gat_head_dim, embed_dim=self.embed_dim,
            predictor_hidden=self.predictor_hidden,
            neighbor_count=self.neighbor_count, buffer_size=self.buffer_size,
            aggregator=self.aggregator, age_mask_mode=self.age_mask_mode,
            attention_activation=self.attention_activation,
            max_timespan=max_timespan)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in names}
        if "fractions" in kwargs:
            kwargs["fractions"] = tuple(kwargs["fractions"])
        return cls(**kwargs)


@dataclass
class EvalMetrics:
    """Old-node (transductive) and new-node (inductive) ranking quality."""

    old_auc: float | None = None
    old_ap: float | None = None
    new_auc: float | None = None
    new_ap: float | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"old_auc": self.old_auc, "old_ap": self.old_ap,
                "new_auc": self.new_auc, "new_ap": self.new_ap,
                "warnings": list(self.warnings)}


@dataclass
class EvalReport:
    variant: str
    metrics: EvalMetrics
    loss_curve: list
    val_history: list
    best_epoch: int
    clamped_predictions: int

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "test": self.metrics.to_dict(),
            "loss_curve": list(self.loss_curve),
            "val_history": list(self.val_history),
            "best_epoch": self.best_epoch,
            "clamped_predictions": self.clamped_predictions,
        }


@dataclass
class TrainResult:
    model: PopularityModel
    report: EvalReport
    train_end_snapshot: dict
    val_end_snapshot: dict
    train_end_index: int
    val_end_index: int


def _batches(events: list, size: int):
    for start in range(0, len(events), size):
        yield events[start:start + size]


def _batch_arrays(trace: Trace, batch: list):
    users = np.array([ev.user_id for ev in batch], dtype=np.intp)
    items = np.array([trace.item_node(ev.item_id) for ev in batch], dtype=np.intp)
    times = np.array([ev.timestamp for ev in batch])
    return users, items, times


def process_batch(model: PopularityModel, state: GraphState, trace: Trace,
                  batch: list, rng: np.random.Generator,
                  counter: ClampCounter, optimizer: Adam | None = None):
    """Run one chronological batch; returns (loss, pos_scores, neg_scores, neg_items).

    With an optimizer, also backpropagates and steps. Always updates the
    state with the batch's ground-truth events afterwards.
    """
    users, items, times = _batch_arrays(trace, batch)
    b = len(batch)
    ref_time = float(times.max())

    participants = np.unique(np.concatenate([users, items]))
    first_time = {}
    for node, t in zip(np.concatenate([users, items]), np.concatenate([times, times])):
        node = int(node)
        if node not in first_time or t < first_time[node]:
            first_time[node] = float(t)
    query_times = np.array([first_time[int(n)] for n in participants])

    new_memory, updated = model.update_node_memories(
        state, participants, query_times, ref_time)

    neg_items = trace.n_users + sample_negatives(b, trace.n_items, rng)
    centers = np.concatenate([users, items, neg_items])
    center_times = np.concatenate([times, times, times])
    memory_rows = model.gather_memory_rows(state, centers, updated, new_memory)
    embeds = model.embed_nodes(state, centers, center_times, memory_rows)

    user_embed = embeds.select_rows(np.arange(0, b))
    pos_embed = embeds.select_rows(np.arange(b, 2 * b))
    neg_embed = embeds.select_rows(np.arange(2 * b, 3 * b))
    pos_scores = model.score_pairs(user_embed, pos_embed)
    neg_scores = model.score_pairs(user_embed, neg_embed)

    from .autodiff import concat
    predictions = concat([pos_scores, neg_scores], axis=0)
    labels = np.concatenate([np.ones(b), np.zeros(b)])
    loss = bce_loss(predictions, labels, counter)

    if optimizer is not None:
        loss.backward()
        model.params.fill_missing_grads()  # untouched params have true grad 0
        optimizer.step()

    if new_memory is not None:
        state.memory.values[updated] = new_memory.data
        state.memory.last_update[updated] = ref_time
    for ev in batch:
        state.insert_event(ev)

    return (float(loss.data), pos_scores.data.copy(), neg_scores.data.copy(),
            neg_items)


def run_eval_pass(model: PopularityModel, state: GraphState, trace: Trace,
                  events: list, new_nodes: frozenset, rng: np.random.Generator,
                  batch_size: int, counter: ClampCounter | None = None) -> EvalMetrics:
    """Score a split chronologically; memory keeps updating with ground truth."""
    counter = counter or ClampCounter()
    scores, labels, involves_new = [], [], []
    with no_grad():
        for batch in _batches(events, batch_size):
            _, pos, neg, neg_items = process_batch(
                model, state, trace, batch, rng, counter, optimizer=None)
            users, items, _ = _batch_arrays(trace, batch)
            for j in range(len(batch)):
                scores.append(pos[j])
                labels.append(1)
                involves_new.append(int(users[j]) in new_nodes or int(items[j]) in new_nodes)
                scores.append(neg[j])
                labels.append(0)
                involves_new.append(int(users[j]) in new_nodes or int(neg_items[j]) in new_nodes)
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    involves_new = np.asarray(involves_new, dtype=bool)

    metrics = EvalMetrics()
    old_mask = ~involves_new
    if old_mask.any() and len(set(labels[old_mask])) == 2:
        metrics.old_auc = auc_metric(scores[old_mask], labels[old_mask])
        metrics.old_ap = average_precision(scores[old_mask], labels[old_mask])
    else:
        metrics.warnings.append("old-node subset empty or single-class; metrics omitted")
    if involves_new.any() and len(set(labels[involves_new])) == 2:
        metrics.new_auc = auc_metric(scores[involves_new], labels[involves_new])
        metrics.new_ap = average_precision(scores[involves_new], labels[involves_new])
    else:
        metrics.warnings.append("new-node subset empty or single-class; metrics omitted")
    return metrics


def train(config: TrainConfig, trace: Trace, split: SplitResult) -> TrainResult:
    """Fit the model on the train split with early stopping on validation AP."""
    config.validate()
    if not split.train:
        raise ValueError("training split is empty")
    model_cfg = config.model_config(max_timespan=max(trace.timespan, 1.0))
    model = PopularityModel(model_cfg, trace.edge_dim, seed=config.seed)
    optimizer = Adam(model.params, learning_rate=config.learning_rate)
    counter = ClampCounter()

    loss_curve: list[float] = []
    val_history: list[dict] = []
    best = None  # (ap, epoch, params, train_snap, val_snap)
    epochs_since_best = 0

    for epoch in range(config.epochs):
        state = build_state(trace, model_cfg)
        train_rng = np.random.default_rng([config.seed, 1001, epoch])
        losses = []
        for batch_idx, batch in enumerate(_batches(split.train, config.batch_size)):
            loss, _, _, _ = process_batch(
                model, state, trace, batch, train_rng, counter, optimizer)
            if not np.isfinite(loss):
                raise DivergenceError(batch_idx)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        loss_curve.append(mean_loss)
        train_snap = state.snapshot()

        val_rng = np.random.default_rng([config.seed, 2002])
        val_metrics = run_eval_pass(
            model, state, trace, split.val, split.new_nodes, val_rng,
            config.batch_size, counter)
        val_snap = state.snapshot()
        val_history.append({"epoch": epoch, "train_loss": mean_loss,
                            **val_metrics.to_dict()})
        log.info("epoch %d: loss %.5f, val old AP %s", epoch, mean_loss,
                 val_metrics.old_ap)

        score = val_metrics.old_ap if val_metrics.old_ap is not None else val_metrics.new_ap
        if score is None:
            score = -mean_loss  # no scorable validation pairs; fall back to loss
        if best is None or score > best[0]:
            best = (score, epoch, model.params.state_arrays(), train_snap, val_snap)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                log.info("early stop after epoch %d", epoch)
                break

    _, best_epoch, best_params, train_snap, val_snap = best
    model.params.load_arrays(best_params)

    test_state = build_state(trace, model_cfg)
    test_state.restore(val_snap)
    test_rng = np.random.default_rng([config.seed, 3003])
    test_metrics = run_eval_pass(
        model, test_state, trace, split.test, split.new_nodes, test_rng,
        config.batch_size, counter) if split.test else EvalMetrics(
            warnings=["test split empty"])

    report = EvalReport(
        variant=model.variant_label,
        metrics=test_metrics,
        loss_curve=loss_curve,
        val_history=val_history,
        best_epoch=best_epoch,
        clamped_predictions=counter.count,
    )
    b1, b2 = split.boundaries
    return TrainResult(model, report, train_snap, val_snap, b1, b2)


def evaluate(model: PopularityModel, state: GraphState, trace: Trace,
             events: list, new_nodes: frozenset, seed: int,
             batch_size: int = 200) -> EvalMetrics:
    """Public evaluation entry point over an arbitrary chronological segment."""
    rng = np.random.default_rng([seed, 3003])
    return run_eval_pass(model, state, trace, events, new_nodes, rng, batch_size)
