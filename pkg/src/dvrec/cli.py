"""Command-line entry point: ``dvrec <command> [options]``.

Commands
--------
synth            write a MovieLens-100K-shaped synthetic rating log
prepare          binarize, k-core filter and split into a DVR1 cache
train            pretrain + bilevel training; trace CSVs, checkpoints, JSON summary
evaluate         full-ranking metrics for a checkpoint
audit            compare network Shapley values with brute-force enumeration
dump-valuation   per-triplet (u, i, j, phi, w_hat, s) rows for sampled batches

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 audit failure.

Configuration precedence for ``train``: built-in defaults, then the
``--config`` file (YAML or JSON mapping of TrainConfig fields), then flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import adapter, checkpoint, metrics, oracle, synthetic
from . import valuator as val
from .data import (
    load_categories,
    load_dataset,
    load_interactions,
    make_batch,
    prepare,
    save_dataset,
)
from .exceptions import CacheFormatError, ComplexityError, ConfigError, DataError, DVRError
from .metrics import METRICS, RANKING_METRICS
from .trainer import COSINE_FIELDS, TRACE_FIELDS, TrainConfig, Trainer, TrainingAborted

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_AUDIT = 0, 1, 2, 3
_log = logging.getLogger("dvrec")


class UsageError(DVRError):
    pass


# -- helpers -------------------------------------------------------------------

def _write_csv(path, fields, rows, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config_file(path):
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping of TrainConfig fields")
    return raw


# -- synth ---------------------------------------------------------------------

def cmd_synth(args):
    ratings, genres = synthetic.write_movielens_like(
        args.output_dir, seed=args.seed, n_users=args.users, n_items=args.items, n_ratings=args.ratings
    )
    print(f"wrote {ratings}")
    print(f"wrote {genres}")
    return EXIT_OK


# -- prepare -------------------------------------------------------------------

def cmd_prepare(args):
    raw = load_interactions(args.interactions, delimiter=_delim(args.delimiter))
    categories = None
    if args.categories:
        cat_path = Path(args.categories)
        if cat_path.exists():
            categories = load_categories(cat_path, delimiter=_delim(args.category_delimiter))
        else:
            _log.warning("category file %s not found; every item gets the 'unknown' category", cat_path)
    else:
        _log.warning("no category file given; every item gets the 'unknown' category")
    threshold = None if args.rating_threshold is not None and args.rating_threshold < 0 else args.rating_threshold
    if not raw.has_ratings:
        threshold = None
    dataset = prepare(raw, rating_threshold=threshold, core=args.core, seed=args.seed, item_categories=categories)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, dataset)
    stats = dataset.stats()
    _write_json(out.with_name(out.name + ".stats.json"), stats)
    for key, value in stats.items():
        print(f"{key}: {value}")
    print(f"wrote {out}")
    return EXIT_OK


def _delim(value):
    if value is None or value == "whitespace":
        return None
    return {"tab": "\t", "\\t": "\t", "comma": ",", "space": " "}.get(value, value)


# -- train ---------------------------------------------------------------------

def build_config(args):
    raw = _load_config_file(args.config) if args.config else {}
    flags = {
        "seed": args.seed, "metric": args.metric, "backbone": args.backbone, "k": args.k,
        "epochs": args.epochs, "pretrain_epochs": args.pretrain_epochs,
        "outer_iterations": args.outer_iterations,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    if args.no_valuator:
        raw["valuator"] = False
    if args.deterministic:
        raw["deterministic"] = True
    return TrainConfig.from_dict(raw)


def _trajectory_recorder(store, limit):
    def record(trainer, row):
        it = trainer.state.iteration
        if it <= limit:
            store[f"P.{it}"] = trainer.theta.P.copy()
            store[f"Q.{it}"] = trainer.theta.Q.copy()
    return record


RUN_LENGTH_FIELDS = ("epochs", "outer_iterations", "patience", "deterministic")


def _resume_config(saved, requested):
    """Keep the checkpoint's config, taking only run-length fields from the request."""
    a, b = saved.to_dict(), requested.to_dict()
    clash = sorted(k for k in a if k not in RUN_LENGTH_FIELDS and a[k] != b[k])
    if clash:
        raise ConfigError(f"resumed run would change {clash}; only {list(RUN_LENGTH_FIELDS)} may differ")
    return dataclasses.replace(saved, **{k: b[k] for k in RUN_LENGTH_FIELDS})


def _train_one(config, dataset, out_dir, args):
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = checkpoint.load_trainer(args.resume, dataset)
        trainer.config = _resume_config(trainer.config, config)
    else:
        trainer = Trainer(config, dataset)
        trainer.pretrain()
    trajectory = {}
    if args.save_trajectory:
        trajectory["P.0"], trajectory["Q.0"] = trainer.theta.P.copy(), trainer.theta.Q.copy()
    callback = _trajectory_recorder(trajectory, args.save_trajectory) if args.save_trajectory else None
    status = "completed"
    try:
        trainer.run(callback=callback)
    except TrainingAborted as exc:
        _log.error("%s", exc)
        status = "aborted"
    result = trainer.result(restore_best=True)

    k = trainer.config.k
    rename = {"val_recall": f"val_recall@{k}", "val_ndcg": f"val_ndcg@{k}"}
    _write_csv(out_dir / "trace.csv", [rename.get(f, f) for f in TRACE_FIELDS],
               [{rename.get(f, f): v for f, v in row.items()} for row in trainer.trace])
    _write_csv(out_dir / "cosine.csv", COSINE_FIELDS, trainer.cosine)
    _write_csv(out_dir / "pretrain.csv", ("epoch", "loss"),
               [{"epoch": e + 1, "loss": v} for e, v in enumerate(trainer.pretrain_losses)])
    checkpoint.save_model(out_dir / "model.dvrc", result.theta, result.valuator,
                          {"best_epoch": result.best_epoch, "best_metric": result.best_metric})
    checkpoint.save_trainer(out_dir / "state.dvrc", trainer)
    if trajectory:
        theta = trainer.theta
        checkpoint.save(out_dir / "trajectory.dvrc", trajectory, {"iterations": len(trajectory) // 2 - 1},
                        theta.backbone, theta.n_users, theta.n_items, theta.d)

    report = metrics.evaluate(result.theta, dataset, "val", config.k, tuple(RANKING_METRICS) + ("loss",),
                              seed=config.seed, threads=1 if config.deterministic else None)
    summary = {
        "status": status,
        "config": config.to_dict(),
        "iterations": trainer.state.iteration,
        "epochs_completed": trainer.state.epoch,
        "early_stopped": trainer.state.stopped,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
        "pretrain_final_loss": trainer.pretrain_losses[-1] if trainer.pretrain_losses else None,
        "validation": report.to_json()["metrics"],
        "skipped_updates": trainer.opt.skipped,
    }
    if result.noise_stats:
        summary["selection"] = result.noise_stats
    _write_json(out_dir / "summary.json", summary)
    return summary


def cmd_train(args):
    config = build_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.output_dir)
    configs = list(config.grid())
    summaries = []
    for cfg in configs:
        target = out if len(configs) == 1 else out / f"lr{cfg.lr:g}_wd{cfg.weight_decay:g}"
        summary = _train_one(cfg, dataset, target, args)
        summaries.append((target, summary))
        print(f"{target}: best {cfg.metric}={summary['best_metric']} at epoch {summary['best_epoch']} "
              f"({summary['status']})")
    if len(configs) > 1:
        sign = 1 if config.direction == "maximize" else -1
        scored = [(t, s) for t, s in summaries if s["best_metric"] is not None]
        best = max(scored, key=lambda ts: sign * ts[1]["best_metric"]) if scored else None
        _write_json(out / "grid.json", {
            "runs": [{"dir": t.name, "lr": s["config"]["lr"], "weight_decay": s["config"]["weight_decay"],
                      "best_metric": s["best_metric"]} for t, s in summaries],
            "best": None if best is None else best[0].name,
        })
    return EXIT_RUNTIME if any(s["status"] != "completed" for _, s in summaries) else EXIT_OK


# -- evaluate ------------------------------------------------------------------

def cmd_evaluate(args):
    dataset = load_dataset(args.data)
    theta, _, meta = checkpoint.load_model(args.checkpoint, dataset.train_pairs)
    wanted = tuple(args.metrics.split(",")) if args.metrics else tuple(RANKING_METRICS) + ("loss",)
    for name in wanted:
        if name not in METRICS:
            raise ConfigError(f"unknown metric {name!r}")
    report = metrics.evaluate(theta, dataset, args.split, args.k, wanted, seed=args.seed,
                              threads=1 if args.deterministic else None)
    label = args.label or Path(args.checkpoint).parent.name or Path(args.checkpoint).stem
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"model": label, **r} for r in report.csv_rows()]
    _write_csv(out / "metrics.csv", ("model", "epoch", "split", "metric", "k", "value"), rows, append=True)
    doc = report.to_json()
    doc["model"] = label
    _write_json(out / f"metrics_{label}_{args.split}.json", doc)
    for name, value in doc["metrics"].items():
        print(f"{label} {args.split} {name}: {value:.6f}")
    return EXIT_OK


# -- audit ---------------------------------------------------------------------

def trivial_net():
    """One neuron over two players with A = [1, 1] and v = [1]."""
    block = val.Block(np.ones((1, 2), dtype=bool), np.ones((1, 2)), np.ones(1))
    d = 1
    return val.ValuatorParams(np.zeros((d, 3 * d)), np.zeros(d), np.zeros(d), np.zeros(()), [block])


def cmd_audit(args):
    if args.nb > oracle.MAX_PLAYERS:
        raise UsageError(f"--nb {args.nb} exceeds the brute-force limit of {oracle.MAX_PLAYERS} players")
    if args.nb < 1:
        raise UsageError("--nb must be positive")
    rng = np.random.default_rng(args.seed)
    reports = []
    if args.trivial_net:
        if args.nb != 2:
            raise UsageError("--trivial-net needs --nb 2")
        reports.append(oracle.audit_z0(trivial_net(), np.ones(2)))
    else:
        if args.checkpoint:
            dataset = load_dataset(args.data) if args.data else None
            theta, params, _ = checkpoint.load_model(args.checkpoint, None if dataset is None else dataset.train_pairs)
            if params is None:
                raise UsageError(f"{args.checkpoint} holds no valuator")
            if params.n_players != args.nb:
                raise UsageError(f"checkpoint valuator has {params.n_players} players, --nb is {args.nb}")
        else:
            params = val.init_valuator(args.nb, d=args.d, n_blocks=args.blocks, tau=args.tau, rng=rng)
            theta = None
        for _ in range(args.batches):
            if args.data and theta is not None:
                batch = make_batch(dataset, args.nb, rng)
                reports.append(oracle.audit(params, batch, theta))
            else:
                z0 = rng.uniform(-1, 1, args.nb)
                z0 = np.where(np.abs(z0) < 1e-3, np.copysign(1e-3, z0), z0)
                reports.append(oracle.audit_z0(params, z0))
    worst = max(r.max_deviation for r in reports)
    eff = max(r.efficiency_residual for r in reports)
    for k, r in enumerate(reports):
        print(f"# batch {k}")
        print(r.to_text())
    if args.output:
        rows = [dict(batch=k, **row) for k, r in enumerate(reports) for row in r.rows()]
        _write_csv(args.output, list(rows[0]), rows)
    ok = worst <= oracle.TOLERANCE
    print(f"max |phi_net - phi_oracle| = {worst:.3e} ({'PASS' if ok else 'FAIL'} at {oracle.TOLERANCE:g})")
    print(f"max efficiency residual = {eff:.3e}")
    return EXIT_OK if ok else EXIT_AUDIT


# -- dump-valuation ------------------------------------------------------------

def cmd_dump_valuation(args):
    dataset = load_dataset(args.data)
    theta, params, meta = checkpoint.load_model(args.checkpoint, dataset.train_pairs)
    if params is None:
        raise UsageError(f"{args.checkpoint} holds no valuator")
    rng = np.random.default_rng(args.seed)
    rf = val.receptive_fields(params)
    cat = dataset.catalog
    rows = []
    for b in range(args.batches):
        batch = make_batch(dataset, params.n_players, rng)
        trace = val.forward(params, theta, batch)
        phi, w_hat = adapter.selection_policy(params, trace, rf, args.epsilon, args.shapley_sign)
        s = adapter.draw_selection(w_hat, rng)
        for m in range(len(batch)):
            rows.append({
                "batch": b, "u": cat.user_ids[batch.users[m]], "i": cat.item_ids[batch.pos[m]],
                "j": cat.item_ids[batch.neg[m]], "phi": phi[m], "w_hat": w_hat[m], "s": int(s[m]),
            })
    _write_csv(args.output, ("batch", "u", "i", "j", "phi", "w_hat", "s"), rows)
    print(f"wrote {len(rows)} rows to {args.output}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dvrec", description="Shapley-valued sample selection for BPR recommenders")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic MovieLens-100K-shaped dataset")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=943)
    p.add_argument("--items", type=int, default=1682)
    p.add_argument("--ratings", type=int, default=100_000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build a prepared-dataset cache")
    p.add_argument("--interactions", required=True)
    p.add_argument("--categories")
    p.add_argument("--delimiter", default="tab", help="tab, comma, space, whitespace or a literal string")
    p.add_argument("--category-delimiter", default="tab")
    p.add_argument("--rating-threshold", type=float, default=4.0, help="negative keeps every rating")
    p.add_argument("--core", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="pretrain and run the bilevel loop")
    p.add_argument("--data", required=True, help="DVR1 cache from 'prepare'")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--metric", choices=sorted(METRICS))
    p.add_argument("--backbone", choices=("mf", "lightgcn"))
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--outer-iterations", type=int)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--no-valuator", action="store_true", help="plain BPR (every triplet selected)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, no wall-clock fields")
    p.add_argument("--save-trajectory", type=int, default=0, metavar="N",
                   help="store P, Q after each of the first N outer iterations")
    p.add_argument("--resume", help="continue from a state.dvrc checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-ranking evaluation of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--metrics", help="comma-separated subset of " + ",".join(METRICS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="check network Shapley values against enumeration")
    p.add_argument("--nb", type=int, default=6)
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--tau", type=int)
    p.add_argument("--trivial-net", action="store_true", help="one neuron, two players, A=[1,1], v=[1]")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--output", help="CSV of per-player rows")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("dump-valuation", help="export per-triplet Shapley values")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--shapley-sign", type=int, choices=(1, -1), default=1)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_dump_valuation)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ComplexityError) as exc:
        print(f"dvrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CacheFormatError, DVRError, OSError, FloatingPointError) as exc:
        print(f"dvrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
