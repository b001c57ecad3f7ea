"""Command-line interface.

Subcommands: ingest, synth-trace, train, evaluate, simulate. Every command
that produces files writes a resolved_config.json next to its outputs;
re-running with the same resolved configuration reproduces every output
byte for byte. All randomness flows from the single --seed value.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .aggregation import AGE_MASK_MODES, AGGREGATOR_MODES
from .autodiff import atomic_write_text
from .cachesim import (HOUR, HourlyModelPredictor, LfuCache, LruCache,
                       ModelCachePolicy, PredictionWindowConfig, simulate)
from .data import (CsvSchema, chronological_split, ingest_csv,
                   load_memory_snapshot, save_memory_snapshot, write_csv)
from .model import PopularityModel
from .synthetic import SyntheticConfig, generate_synthetic_trace
from .training import TrainConfig, evaluate, train

log = logging.getLogger("agecache")


class UsageError(Exception):
    pass


def _dump_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    _require_file(path)
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise UsageError(f"config file must hold a flat JSON object: {path}")
    return payload


def _parse_fractions(text: str) -> tuple:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"fractions must be three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _parse_int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


# ---- subcommands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    _require_file(args.input)
    trace, summary = ingest_csv(args.input, CsvSchema(has_label=not args.no_label))
    text = json.dumps(summary, sort_keys=True, indent=2)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return 0


def cmd_synth_trace(args) -> int:
    config = SyntheticConfig(
        seed=args.seed, n_users=args.users, n_items=args.items,
        n_clusters=args.clusters, hours=args.hours,
        events_per_hour=args.events_per_hour, zipf_s=args.zipf_s,
        drift_period_hours=args.drift_period, feature_noise=args.feature_noise)
    trace = generate_synthetic_trace(config)
    write_csv(args.out, trace)
    print(json.dumps(trace.summary(), sort_keys=True, indent=2))
    return 0


TRAIN_FLAG_FIELDS = (
    "seed", "epochs", "batch_size", "learning_rate", "patience", "aggregator",
    "age_mask_mode", "attention_activation", "neighbor_count", "buffer_size",
    "heads", "memory_dim", "time_dim", "head_dim", "ffn_hidden", "thresh_hidden",
    "gat_heads", "gat_head_dim", "embed_dim", "predictor_hidden",
)


def _resolve_train_config(args) -> TrainConfig:
    resolved = TrainConfig().to_dict()
    resolved.update(_load_config_file(args.config))
    for name in TRAIN_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    if getattr(args, "fractions", None) is not None:
        resolved["fractions"] = list(_parse_fractions(args.fractions))
    try:
        config = TrainConfig.from_dict(resolved)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return config


def cmd_train(args) -> int:
    _require_file(args.input)
    config = _resolve_train_config(args)
    os.makedirs(args.outdir, exist_ok=True)

    trace, summary = ingest_csv(args.input)
    split = chronological_split(trace, config.fractions)
    result = train(config, trace, split)

    resolved = {"command": "train", "input": args.input, **config.to_dict()}
    _dump_json(os.path.join(args.outdir, "resolved_config.json"), resolved)
    _dump_json(os.path.join(args.outdir, "dataset_summary.json"), summary)
    result.model.save(os.path.join(args.outdir, "checkpoint.json"))

    from .model import build_state
    for tag, snap, boundary in (("train_end", result.train_end_snapshot, result.train_end_index),
                                ("val_end", result.val_end_snapshot, result.val_end_index)):
        state = build_state(trace, result.model.config)
        state.restore(snap)
        save_memory_snapshot(os.path.join(args.outdir, f"memory_{tag}.json"),
                             state, boundary, tag=tag)

    _dump_json(os.path.join(args.outdir, "metrics.json"), result.report.to_dict())
    rows = ["epoch,train_loss,val_old_auc,val_old_ap,val_new_auc,val_new_ap"]
    for entry in result.report.val_history:
        rows.append(",".join("" if entry.get(k) is None else repr(entry.get(k))
                             for k in ("epoch", "train_loss", "old_auc", "old_ap",
                                       "new_auc", "new_ap")))
    atomic_write_text(os.path.join(args.outdir, "loss_curve.csv"), "\n".join(rows) + "\n")
    print(json.dumps(result.report.to_dict()["test"], sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    _require_file(args.input)
    _require_file(args.checkpoint)
    _require_file(args.memory)
    os.makedirs(args.outdir, exist_ok=True)
    trace, _ = ingest_csv(args.input)
    model = PopularityModel.load(args.checkpoint)
    state, boundary = load_memory_snapshot(
        args.memory, trace, model.config.memory_dim, model.config.buffer_size)
    fractions = _parse_fractions(args.fractions)
    split = chronological_split(trace, fractions)
    events = trace.events[boundary:]
    metrics = evaluate(model, state, trace, events, split.new_nodes,
                       seed=args.seed, batch_size=args.batch_size)
    resolved = {"command": "evaluate", "input": args.input,
                "checkpoint": args.checkpoint, "memory": args.memory,
                "fractions": list(fractions), "seed": args.seed,
                "batch_size": args.batch_size}
    _dump_json(os.path.join(args.outdir, "resolved_config.json"), resolved)
    payload = {"variant": model.variant_label, "segment_events": len(events),
               **metrics.to_dict()}
    _dump_json(os.path.join(args.outdir, "metrics.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    policies_requested = [p.strip() for p in args.policies.split(",") if p.strip()]
    for name in policies_requested:
        if name not in ("lru", "lfu", "model"):
            raise UsageError(f"unknown policy {name!r}; choose from lru, lfu, model")
    capacities = _parse_int_list(args.cache_size)
    if not capacities or any(c < 0 for c in capacities):
        raise UsageError("cache sizes must be non-negative integers")
    os.makedirs(args.outdir, exist_ok=True)

    synth_config = None
    if args.trace == "synthetic":
        synth_config = SyntheticConfig(
            seed=args.seed, n_users=args.users, n_items=args.items,
            n_clusters=args.clusters, hours=args.hours,
            events_per_hour=args.events_per_hour, zipf_s=args.zipf_s,
            drift_period_hours=args.drift_period, feature_noise=args.feature_noise)
        trace = generate_synthetic_trace(synth_config)
    else:
        _require_file(args.trace)
        trace, _ = ingest_csv(args.trace)
    if not trace.events:
        raise UsageError("trace is empty")

    window = PredictionWindowConfig(
        step_seconds=args.step_seconds, request_threshold=args.threshold,
        memory_update_hours=args.memory_update_hours,
        candidate_scope=args.candidate_scope,
        fake_memory_updates=args.fake_updates)
    try:
        window.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    boundary = int(math.floor(args.start_fraction * len(trace.events)))
    policies = []
    if "model" in policies_requested:
        if not args.checkpoint:
            raise UsageError("policy 'model' requires --checkpoint")
        _require_file(args.checkpoint)
        model = PopularityModel.load(args.checkpoint)
        if args.memory:
            _require_file(args.memory)
            state, boundary = load_memory_snapshot(
                args.memory, trace, model.config.memory_dim, model.config.buffer_size)
        else:
            from .model import build_state
            state = build_state(trace, model.config)
            from .cachesim import ingest_events
            ingest_events(model, state, trace, trace.events[:boundary])
        segment = trace.events[boundary:]
        if not segment:
            raise UsageError("simulation segment is empty; lower --start-fraction")
        warm_cut = segment[0].timestamp - 2 * HOUR
        warmup = [ev for ev in trace.events[:boundary] if ev.timestamp >= warm_cut]
        predictor = HourlyModelPredictor(model, state, trace, window, warmup)
        for c in capacities:
            policies.append(ModelCachePolicy(predictor, c))
    segment = trace.events[boundary:]
    if not segment:
        raise UsageError("simulation segment is empty; lower --start-fraction")
    for c in capacities:
        if "lru" in policies_requested:
            policies.append(LruCache(c))
        if "lfu" in policies_requested:
            policies.append(LfuCache(c))

    results = simulate(segment, policies)

    rows = ["hour,policy,cache_size,hit_rate"]
    for res in sorted(results, key=lambda r: (r.name, r.capacity)):
        for hour, rate in zip(res.hours, res.hit_rates()):
            rows.append(f"{hour},{res.name},{res.capacity},{rate!r}")
    atomic_write_text(os.path.join(args.outdir, "hit_rates.csv"), "\n".join(rows) + "\n")

    resolved = {"command": "simulate", "trace": args.trace, "seed": args.seed,
                "policies": policies_requested, "cache_sizes": capacities,
                "start_fraction": args.start_fraction,
                "checkpoint": args.checkpoint, "memory": args.memory,
                "window": {"step_seconds": window.step_seconds,
                           "request_threshold": window.request_threshold,
                           "memory_update_hours": window.memory_update_hours,
                           "candidate_scope": window.candidate_scope,
                           "fake_memory_updates": window.fake_memory_updates}}
    if synth_config is not None:
        resolved["synthetic"] = {
            "users": synth_config.n_users, "items": synth_config.n_items,
            "clusters": synth_config.n_clusters, "hours": synth_config.hours,
            "events_per_hour": synth_config.events_per_hour,
            "zipf_s": synth_config.zipf_s,
            "drift_period_hours": synth_config.drift_period_hours,
            "feature_noise": synth_config.feature_noise}
    _dump_json(os.path.join(args.outdir, "resolved_config.json"), resolved)
    summary = {"segment_events": len(segment),
               "results": [res.to_dict() for res in
                           sorted(results, key=lambda r: (r.name, r.capacity))]}
    _dump_json(os.path.join(args.outdir, "summary.json"), summary)
    print(json.dumps({r["policy"] + "@" + str(r["cache_size"]): r["overall"]
                      for r in summary["results"]}, sort_keys=True))
    return 0


# ---- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agecache",
        description="Edge-cache simulation driven by a temporal-graph popularity model")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a trace CSV and print its summary")
    p.add_argument("input")
    p.add_argument("--no-label", action="store_true",
                   help="rows have no state-label column")
    p.add_argument("--out", help="also write the summary JSON here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth-trace", help="generate a synthetic trace CSV")
    p.add_argument("--out", required=True)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth_trace)

    p = sub.add_parser("train", help="train the popularity model on a trace")
    p.add_argument("--input", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--config", help="flat JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--fractions", help="train,val,test fractions, e.g. 0.7,0.15,0.15")
    p.add_argument("--aggregator", choices=AGGREGATOR_MODES)
    p.add_argument("--age-mask-mode", dest="age_mask_mode", choices=AGE_MASK_MODES)
    p.add_argument("--attention-activation", dest="attention_activation",
                   choices=("identity", "sigmoid"))
    p.add_argument("--neighbors", dest="neighbor_count", type=int)
    p.add_argument("--buffer-size", dest="buffer_size", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--memory-dim", dest="memory_dim", type=int)
    p.add_argument("--time-dim", dest="time_dim", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int)
    p.add_argument("--thresh-hidden", dest="thresh_hidden", type=int)
    p.add_argument("--gat-heads", dest="gat_heads", type=int)
    p.add_argument("--gat-head-dim", dest="gat_head_dim", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--predictor-hidden", dest="predictor_hidden", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a held-out segment with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--fractions", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=200)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="run cache policies over a trace segment")
    p.add_argument("--trace", required=True, help="trace CSV path or 'synthetic'")
    p.add_argument("--outdir", required=True)
    p.add_argument("--policies", default="lru,lfu")
    p.add_argument("--cache-size", dest="cache_size", default="15",
                   help="capacity or comma-separated sweep, e.g. 5,10,15,20")
    p.add_argument("--checkpoint", help="model checkpoint (policy 'model')")
    p.add_argument("--memory", help="memory snapshot fixing the segment start")
    p.add_argument("--start-fraction", dest="start_fraction", type=float, default=0.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--step-seconds", dest="step_seconds", type=float, default=6.0)
    p.add_argument("--memory-update-hours", dest="memory_update_hours", type=int, default=1)
    p.add_argument("--candidate-scope", dest="candidate_scope", default="recent-1h",
                   choices=("all-items", "recent-1h", "recent-2h"))
    p.add_argument("--fake-updates", dest="fake_updates", action="store_true")
    _add_synth_flags(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--items", type=int, default=64)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--hours", type=int, default=24)
    p.add_argument("--events-per-hour", dest="events_per_hour", type=int, default=500)
    p.add_argument("--zipf-s", dest="zipf_s", type=float, default=1.0)
    p.add_argument("--drift-period", dest="drift_period", type=int, default=0)
    p.add_argument("--feature-noise", dest="feature_noise", type=float, default=0.1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
