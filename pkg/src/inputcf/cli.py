"""Command-line surface: split, train, evaluate, summary, inputs-dump.

Every command is a batch job driven by a JSON config (schema shipped in
docs/config.schema.json) or explicit flags; outputs are files (checkpoints,
CSV histories, metric reports) laid out under a run directory. Exit codes
are a stable scripting contract: 0 success, 2 configuration error, 3
numerical failure during training, 4 I/O error.

Output directory precedence for `train`: --out flag, then the
INPUTCF_OUTPUT_DIR environment variable, then output_dir in the config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import data as data_mod
from .config import (
    ConfigError,
    load_config,
    model_config_from,
    post_input_plan_from,
    resolve_config,
    train_plan_from,
)
from .metrics import evaluate_implicit, evaluate_rating
from .model import (
    build_model,
    export_hypothesis,
    input_count,
    summation_fusion_param_count,
)
from .rng import STREAM_INIT, stream
from .training import (
    NumericalError,
    apply_checkpoint_tensors,
    checkpoint_read,
    run_fingerprint,
    save_model_archive,
    train_alternating,
    train_joint,
    train_post_input,
)

OUTPUT_DIR_ENV = "INPUTCF_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


# -- shared plumbing ---------------------------------------------------------

def _load_dataset(cfg: dict, path_override=None) -> data_mod.InteractionMatrix:
    ds = cfg["dataset"]
    matrix = data_mod.ingest(path_override or ds["path"], ds["format"])
    if ds["binarize"]:
        matrix = data_mod.to_implicit(matrix)
    return matrix


def _split_dataset(cfg: dict, matrix) -> data_mod.SplitBundle:
    sp = cfg["split"]
    if sp["protocol"] == "random":
        return data_mod.split_random(matrix, tuple(sp["ratios"]), cfg["seed"])
    return data_mod.split_leave_one_out(matrix)


def _build_from_config(cfg: dict, split):
    return build_model(model_config_from(cfg), split.train,
                       stream(cfg["seed"], STREAM_INIT))


def _rebuild_from_checkpoint(path, data_override=None):
    """Reconstruct (cfg, matrix, split, model, manifest) from an archive."""
    manifest, tensors = checkpoint_read(path)
    raw_cfg = manifest.get("run_config")
    if raw_cfg is None:
        raise ConfigError("checkpoint has no embedded run config")
    cfg = resolve_config(raw_cfg)
    matrix = _load_dataset(cfg, data_override)
    stored_hash = manifest.get("id_map_hash")
    if stored_hash is not None and stored_hash != matrix.id_map_hash():
        raise ConfigError("dataset does not match the checkpoint's ID maps")
    split = _split_dataset(cfg, matrix)
    model = _build_from_config(cfg, split)
    expect = run_fingerprint(model, split, train_plan_from(cfg))
    if manifest["config_hash"] != expect:
        raise ConfigError("checkpoint was produced by a different configuration")
    apply_checkpoint_tensors(model, tensors)
    return cfg, matrix, split, model, manifest


def _write_history_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: history-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_rmse"])
        for row in rows:
            writer.writerow([row.epoch, f"{row.train_loss:.10g}",
                             "" if row.val_rmse is None else f"{row.val_rmse:.10g}"])


def _write_phases_csv(path, phases) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: phases-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["round", "phase", "epochs", "loss_before",
                         "loss_after", "rolled_back", "loss_effective"])
        for p in phases:
            writer.writerow([p.round, p.phase, p.epochs, f"{p.loss_before:.10g}",
                             f"{p.loss_after:.10g}", int(p.rolled_back),
                             f"{p.loss_effective:.10g}"])


def _write_post_input_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: post-input-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rmse", "val_rmse"])
        for row in rows:
            writer.writerow([row.epoch, f"{row.train_rmse:.10g}",
                             "" if row.val_rmse is None else f"{row.val_rmse:.10g}"])


def _group_counts(model) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, arr in model.parameters().items():
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + int(arr.size)
    return counts


def summarize(cfg: dict, matrix=None) -> dict:
    """Exact trainable-scalar counts per group plus the theoretical size.

    The theoretical count prices the summation-fusion form of the same
    scorer: one width-d table per entity on each side, one output table, and
    square hidden fusion layers.
    """
    if matrix is None:
        matrix = _load_dataset(cfg)
    split = _split_dataset(cfg, matrix)
    model = _build_from_config(cfg, split)
    groups = _group_counts(model)
    d = cfg["model"]["user_layers"][-1]
    num_f = len(cfg["model"]["fusion_layers"])
    pi = summation_fusion_param_count(matrix.m, matrix.n, 1, d, num_f)
    return {
        "variant": cfg["model"]["variant"],
        "dataset": {"users": matrix.m, "items": matrix.n,
                    "interactions": matrix.nnz},
        "network_groups": groups,
        "network_total": sum(groups.values()),
        "input_user_count": split.train.nnz,
        "input_item_count": split.train.nnz,
        "input_total": input_count(split.train),
        "theoretical_summation_fusion": pi,
    }


# -- commands ----------------------------------------------------------------

def cmd_split(args) -> int:
    matrix = data_mod.ingest(args.input, args.format)
    if args.protocol == "random":
        try:
            ratios = tuple(float(r) for r in args.ratios.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad ratios {args.ratios!r}: {exc}") from exc
        if len(ratios) != 3:
            raise ConfigError("ratios must be three comma-separated numbers")
        split = data_mod.split_random(matrix, ratios, args.seed)
    else:
        split = data_mod.split_leave_one_out(matrix)
    os.makedirs(args.out, exist_ok=True)
    parts = (("train", split.train), ("validation", split.validation),
             ("test", split.test))
    for name, part in parts:
        data_mod.write_entries(part, os.path.join(args.out, f"{name}.csv"))
    manifest = {
        "protocol": split.protocol,
        "seed": split.seed,
        "ratios": None if args.protocol != "random" else list(ratios),
        "counts": {name: part.nnz for name, part in parts},
        "users": matrix.m,
        "items": matrix.n,
        "id_map_hash": matrix.id_map_hash(),
    }
    with open(os.path.join(args.out, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"split written to {args.out}: " +
          ", ".join(f"{name}={part.nnz}" for name, part in parts))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or os.environ.get(OUTPUT_DIR_ENV) or cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")

    matrix = _load_dataset(cfg)
    split = _split_dataset(cfg, matrix)
    model = _build_from_config(cfg, split)
    plan = train_plan_from(cfg)
    schedule = cfg["training"]["schedule"]
    extra = {"run_config": cfg, "id_map_hash": matrix.id_map_hash()}
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    archive_path = os.path.join(out_dir, "model.bin")
    started = time.monotonic()

    try:
        if schedule == "alternating":
            result = train_alternating(model, split, plan)
            _write_phases_csv(os.path.join(out_dir, "phases.csv"), result.phases)
            save_model_archive(archive_path, model, split, plan,
                               history=result.history, extra=extra)
            post_rows = None
        elif schedule == "joint_then_post_input":
            result = train_joint(model, split, plan, checkpoint_path=ckpt_path,
                                 checkpoint_every=cfg["training"]["checkpoint_every"],
                                 resume_from=args.from_checkpoint,
                                 manifest_extra=extra)
            post = train_post_input(model, split, post_input_plan_from(cfg),
                                    epoch_offset=len(result.history))
            post_rows = post.rows
            _write_post_input_csv(os.path.join(out_dir, "post_input.csv"), post_rows)
            save_model_archive(archive_path, model, split, plan,
                               history=result.history, extra=extra)
        else:
            result = train_joint(model, split, plan, checkpoint_path=ckpt_path,
                                 checkpoint_every=cfg["training"]["checkpoint_every"],
                                 resume_from=args.from_checkpoint,
                                 stop_after=args.stop_after,
                                 archive_path=archive_path,
                                 manifest_extra=extra)
            post_rows = None
    except NumericalError:
        if os.path.exists(ckpt_path):
            print(f"last checkpoint: {ckpt_path}", file=sys.stderr)
        raise

    _write_history_csv(os.path.join(out_dir, "history.csv"), result.history)
    run_doc = {
        "schedule": schedule,
        "epochs_executed": len(result.history),
        "final_train_loss": result.final_train_loss,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "paused": result.paused,
        "network_param_count": model.network_param_count(),
        "input_count": input_count(split.train),
        "wall_seconds": round(time.monotonic() - started, 3),
    }
    if post_rows is not None:
        run_doc["post_input"] = {
            "train_rmse_start": post_rows[0].train_rmse,
            "train_rmse_end": post_rows[-1].train_rmse,
            "val_rmse_start": post_rows[0].val_rmse,
            "val_rmse_end": post_rows[-1].val_rmse,
        }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(run_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained {cfg['model']['variant']} for {len(result.history)} epochs; "
          f"final train loss {result.final_train_loss:.6f}; outputs in {out_dir}")
    return EXIT_OK


_METRIC_PREFIXES = {"rmse": "rmse", "precision": "precision_at",
                    "hr": "hr_at", "ndcg": "ndcg_at"}


def cmd_evaluate(args) -> int:
    cfg, _, split, model, _ = _rebuild_from_checkpoint(args.checkpoint, args.data)
    wanted = args.metrics.split(",") if args.metrics else cfg["eval"]["metrics"]
    unknown = set(wanted) - set(_METRIC_PREFIXES)
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}")
    rating = {"rmse", "precision"} & set(wanted)
    implicit = {"hr", "ndcg"} & set(wanted)
    if rating and implicit:
        raise ConfigError("rating and ranking metrics need separate invocations")
    if implicit and split.protocol != "leave-one-out":
        raise ConfigError("hr/ndcg need a leave-one-out split")
    hyp = export_hypothesis(model)
    ev = cfg["eval"]
    if implicit:
        report = evaluate_implicit(hyp, split, k=ev["k"],
                                   num_negatives=ev["num_negatives"],
                                   seed=cfg["seed"],
                                   include_per_user=args.per_user)
    else:
        report = evaluate_rating(hyp, split, p_pct=ev["p_pct"],
                                 include_per_user=args.per_user)
    prefixes = tuple(_METRIC_PREFIXES[w] for w in wanted)
    report.scores = {k: v for k, v in report.scores.items()
                     if k.startswith(prefixes)}
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "report.json"))
    report.write_csv(os.path.join(args.out, "report.csv"))
    if args.per_user and report.per_user:
        report.write_per_user_csv(os.path.join(args.out, "per_user.csv"))
    for name in sorted(report.scores):
        print(f"{name}: {report.scores[name]:.6f}")
    return EXIT_OK


def cmd_summary(args) -> int:
    cfg = load_config(args.config)
    doc = summarize(cfg)
    ds = doc["dataset"]
    print(f"variant: {doc['variant']}")
    print(f"dataset: {ds['users']} users x {ds['items']} items, "
          f"{ds['interactions']} interactions")
    for group in sorted(doc["network_groups"]):
        print(f"network/{group}: {doc['network_groups'][group]}")
    print(f"network total: {doc['network_total']}")
    print(f"inputs/user-side: {doc['input_user_count']}")
    print(f"inputs/item-side: {doc['input_item_count']}")
    print(f"inputs total: {doc['input_total']}")
    print(f"summation-fusion equivalent: {doc['theoretical_summation_fusion']}")
    return EXIT_OK


def cmd_inputs_dump(args) -> int:
    _, _, split, model, _ = _rebuild_from_checkpoint(args.checkpoint, args.data)
    train = split.train
    user_ids = train.user_ids if train.user_ids is not None \
        else [str(i) for i in range(train.m)]
    item_ids = train.item_ids if train.item_ids is not None \
        else [str(i) for i in range(train.n)]
    os.makedirs(args.out, exist_ok=True)
    init_u = model.inputs.initial_u_values()
    with open(os.path.join(args.out, "inputs_user.csv"), "w", newline="") as fh:
        fh.write("# schema: inputs-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "initial_value", "learned_value"])
        for pos in range(train.nnz):
            writer.writerow([user_ids[train.users[pos]], item_ids[train.items[pos]],
                             f"{init_u[pos]:.10g}",
                             f"{model.inputs.u_values[pos]:.10g}"])
    init_v = model.inputs.initial_v_values()
    col_users = train.users[train.csc_order]
    col_items = train.items[train.csc_order]
    with open(os.path.join(args.out, "inputs_item.csv"), "w", newline="") as fh:
        fh.write("# schema: inputs-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["item", "user", "initial_value", "learned_value"])
        for pos in range(train.nnz):
            writer.writerow([item_ids[col_items[pos]], user_ids[col_users[pos]],
                             f"{init_v[pos]:.10g}",
                             f"{model.inputs.v_values[pos]:.10g}"])
    print(f"input values written to {args.out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inputcf",
        description="Collaborative filtering with learnable interaction inputs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a dataset into train/validation/test")
    p.add_argument("--input", required=True, help="interaction file")
    p.add_argument("--format", required=True,
                   choices=["movielens-tab", "movielens-double-colon", "csv"])
    p.add_argument("--protocol", default="random",
                   choices=["random", "leave-one-out"])
    p.add_argument("--ratios", default="0.8,0.1,0.1",
                   help="train,validation,test fractions (random protocol)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run a configured training schedule")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", default=None, help="run directory override")
    p.add_argument("--from-checkpoint", default=None,
                   help="resume a joint run from this checkpoint")
    p.add_argument("--stop-after", type=int, default=None,
                   help="pause the joint run after this many epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model on its split")
    p.add_argument("--checkpoint", required=True, help="model archive")
    p.add_argument("--data", default=None, help="dataset path override")
    p.add_argument("--metrics", default=None,
                   help="comma list from rmse,precision,hr,ndcg")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--per-user", action="store_true",
                   help="also write per-user scores")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("summary", help="print parameter counts for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("inputs-dump",
                       help="dump initial vs learned input values as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="dataset path override")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inputs_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
