"""Command-line entry point: ``sse <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 data or I/O error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as tc
from .checkpoint import load_checkpoint
from .data import (RowError, SchemaError, UNKNOWN, Vocab, build_vocab, featurize_all,
                   length_distribution_report, load_sessions, write_sessions)
from .model import ConfigError, ModelConfig
from .objective import rank, recall_at_k
from .oracle import benchmark_complexity, check_equivalence, random_frame, random_params, report_csv
from .synthetic import generate_synthetic
from .trainer import (MANY_TO_MANY, MANY_TO_ONE, Ensemble, TrainConfig, cross_validate,
                      evaluate_recall, final_pmfs, final_targets, popularity_recall,
                      read_config_file)

logger = logging.getLogger("sse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
METRICS_HEADER = ("epoch", "fold", "split", "recall_at_4", "loss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    return int(os.environ.get("SSE_SEED", "0"))


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """JSON record of a command, written before any other side effect."""

    def __init__(self, path, command: str, config: dict, seeds: dict, inputs=(),
                 artifacts=()):
        self.path = Path(path)
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "seeds": seeds,
            "inputs": {str(p): _digest(p) for p in inputs},
            "artifacts": [str(a) for a in artifacts],
            "completed": [],
            "status": "running",
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def completed(self, artifact) -> None:
        self.data["completed"].append(str(artifact))
        self.write()

    def finish(self, status: str = "ok") -> None:
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.write()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    config = {"sessions": args.sessions, "cities": args.cities, "blocks": args.blocks,
              "within_block": args.within_block}
    manifest = RunManifest(f"{out}.manifest.json", "synth", config, {"seed": args.seed},
                           artifacts=[out])
    if args.sessions == 0:
        logger.warning("--sessions 0: writing a header-only file")
    sessions = generate_synthetic(args.sessions, args.cities, args.blocks, seed=args.seed,
                                  within_block=args.within_block)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sessions(sessions, out)
    manifest.completed(out)
    manifest.finish()
    print(f"sessions={len(sessions)} path={out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    out = Path(args.out)
    manifest = RunManifest(out / "manifest.json", "stats", {}, {}, inputs=args.data,
                           artifacts=[out / "lengths.csv"])
    sessions = []
    for path in args.data:
        part, report = load_sessions(path, strict=not args.lenient)
        sessions += part
        print(f"file={path} rows={report.rows} malformed={report.malformed} "
              f"sessions={len(part)}")
    lengths = length_distribution_report(sessions)
    table = lengths.format()
    (out / "lengths.csv").write_text(table + "\n", encoding="utf-8")
    manifest.completed(out / "lengths.csv")
    print(table)
    print(f"sessions={len(sessions)} single_booking={lengths.dropped} "
          f"augmentation_factor={lengths.augmentation_factor:.4f}")
    manifest.finish()
    return EXIT_OK


def _resolve_train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    values = read_config_file(args.config) if args.config else {}
    flags = {
        "model_type": {"m2m": MANY_TO_MANY, "m2o": MANY_TO_ONE}.get(args.model),
        "cell": {"gru": "GRU", "lstm": "LSTM"}.get(args.cell),
        "decoder": {"tied": "tied", "ff": "feedforward"}.get(args.decoder),
        "weight_mode": {"on": "WEIGHTED", "off": "UNWEIGHTED"}.get(args.weighting),
        "epochs": args.epochs, "folds": args.folds, "batch_size": args.batch_size,
        "learning_rate": args.lr, "seed": args.seed, "hidden_dim": args.hidden_dim,
        "precision": args.precision,
    }
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    values.setdefault("seed", str(_default_seed()))
    try:
        return ModelConfig.from_mapping(values), TrainConfig.from_mapping(values)
    except (ConfigError, ValueError, TypeError) as err:
        raise UsageError(str(err)) from err


def _read_frames_input(paths, strict=True):
    sessions = []
    for path in paths:
        sessions += load_sessions(path, strict=strict)[0]
    short = sum(1 for s in sessions if len(s) < 2)
    if short:
        logger.warning("skipping %d session(s) with fewer than 2 bookings", short)
    return sessions


def cmd_train(args) -> int:
    model_config, train_config = _resolve_train_configs(args)
    out = Path(args.out)
    config = {"model": asdict(model_config), "train": asdict(train_config)}
    manifest = RunManifest(out / "manifest.json", "train", config,
                           {"seed": train_config.seed}, inputs=args.data,
                           artifacts=[out / "metrics.csv", out / "vocab.json"]
                           + [out / f"fold{i}" / "checkpoint.sse"
                              for i in range(train_config.folds)])
    sessions = _read_frames_input(args.data)
    vocab = build_vocab(sessions)
    frames = featurize_all(sessions, vocab)
    (out / "config.txt").write_text(
        "\n".join(model_config.to_lines() + train_config.to_lines()) + "\n", encoding="utf-8")
    popular = Counter(int(t) for f in frames for t in f.targets if t != UNKNOWN)
    vocab_blob = json.loads(vocab.to_json())
    vocab_blob["popular"] = [c for c, _ in popular.most_common(4)]
    (out / "vocab.json").write_text(json.dumps(vocab_blob, sort_keys=True), encoding="utf-8")
    manifest.completed(out / "vocab.json")

    start = time.perf_counter()
    result = cross_validate(frames, model_config, train_config, vocab.cardinalities(),
                            out_dir=out, jobs=args.jobs)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in result.folds:
            for e in r.history:
                w.writerow([e.epoch, r.fold, "train", f"{e.train_recall:.6f}", f"{e.train_loss:.6f}"])
                w.writerow([e.epoch, r.fold, "val", f"{e.val_recall:.6f}", f"{e.val_loss:.6f}"])
    manifest.completed(out / "metrics.csv")
    summary = {"folds": [{"fold": r.fold, "best_epoch": r.best_epoch,
                          "best_recall": r.best_recall,
                          "checkpoint": Path(r.checkpoint).relative_to(out).as_posix()}
                         for r in result.folds],
               "failures": {str(k): v for k, v in result.failures.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for r in result.folds:
        manifest.completed(r.checkpoint)
        print(f"fold={r.fold} best_epoch={r.best_epoch} val_recall_at_4={r.best_recall:.4f}")
    for fold, err in result.failures.items():
        print(f"fold={fold} status=failed error={err!r}")
    if result.folds:
        mean = float(np.mean([r.best_recall for r in result.folds]))
        print(f"mean_val_recall_at_4={mean:.4f} seconds={time.perf_counter() - start:.1f}")
    manifest.finish("ok" if not result.failures else "partial")
    return EXIT_OK if result.folds else EXIT_DATA


def _load_run(run: Path):
    blob = json.loads((run / "vocab.json").read_text(encoding="utf-8"))
    popular = blob.pop("popular", [])
    vocab = Vocab.from_json(json.dumps(blob))
    summary = json.loads((run / "summary.json").read_text(encoding="utf-8"))
    folds = sorted(summary["folds"], key=lambda f: f["fold"])
    if not folds:
        raise FileNotFoundError(f"{run} has no trained folds")
    members = [load_checkpoint(run / f["checkpoint"]) for f in folds]
    for m in members:
        if m.cardinalities != vocab.cardinalities():
            raise SchemaError(f"checkpoint does not match the vocabulary in {run}")
    return vocab, popular, folds, members


def cmd_eval(args) -> int:
    run = Path(args.run)
    manifest = RunManifest(run / "eval.manifest.json", "eval", {"k": args.k},
                           {}, inputs=[run / "vocab.json", *args.data])
    vocab, popular, folds, members = _load_run(run)
    frames = featurize_all(_read_frames_input(args.data), vocab)
    if not frames:
        raise SchemaError("no session with at least 2 bookings to evaluate")
    best = max(range(len(folds)), key=lambda i: (folds[i]["best_recall"], -i))
    with tc.precision(32):
        single = evaluate_recall(frames, members[best], args.k)
        ensemble = evaluate_recall(frames, Ensemble(members), args.k)
    truths = final_targets(frames)
    baseline = float(np.isin(truths, popular[:args.k]).mean())
    print(f"trips={len(frames)}")
    print(f"recall_at_{args.k}_single={single:.6f} fold={folds[best]['fold']}")
    print(f"recall_at_{args.k}_ensemble={ensemble:.6f} members={len(members)}")
    print(f"recall_at_{args.k}_popularity={baseline:.6f}")
    manifest.finish()
    return EXIT_OK


def cmd_predict(args) -> int:
    run, out = Path(args.run), Path(args.out)
    manifest = RunManifest(f"{out}.manifest.json", "predict", {"k": 4}, {},
                           inputs=[run / "vocab.json", *args.data], artifacts=[out])
    vocab, _, _, members = _load_run(run)
    sessions = _read_frames_input(args.data)
    kept = [s for s in sessions if len(s) >= 2]
    frames = featurize_all(kept, vocab)
    with tc.precision(32):
        pmfs = Ensemble(members).predict(frames)
    cities = vocab.cities()
    results = rank(pmfs, final_targets(frames), 4, exclude=(UNKNOWN,))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("utrip_id", "city_id_1", "city_id_2", "city_id_3", "city_id_4"))
        for s, r in zip(kept, results):
            w.writerow([s.utrip_id, *(cities[i] for i in r.top)])
    manifest.completed(out)
    manifest.finish()
    print(f"rows={len(kept)} path={out}")
    return EXIT_OK


VERIFY_COMBOS = (("GRU", "tied"), ("GRU", "feedforward"), ("LSTM", "tied"), ("LSTM", "feedforward"))


def verification_config(cell: str, decoder: str) -> ModelConfig:
    """Narrow dims that keep the oracle sweep quick while exercising every path."""
    return ModelConfig(cell=cell, decoder=decoder, hidden_dim=8, city_dim=8,
                       categorical_dim=3, device_dim=2, numerical_dim=2,
                       input_dropout=0.0, recurrent_dropout=0.0)


def run_verification(max_length: int, trials: int, seed: int, tolerance: float,
                     grad_tolerance: float = 1e-7):
    """Equivalence, gradient-equivalence and op-count checks on random instances.

    Returns ``(reports, failures)``; failures are human-readable strings.
    """
    reports, failures = [], []
    with tc.precision(64):
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial])
            for cell, decoder in VERIFY_COMBOS:
                config = verification_config(cell, decoder)
                cards = [12] + [int(c) for c in rng.integers(3, 9, size=13)]
                params = random_params(config, cards, rng)
                for T in range(1, max_length + 1):
                    frame = random_frame(T, cards, rng)
                    rep = check_equivalence(frame, params, tolerance, gradients=True,
                                            grad_tolerance=grad_tolerance)
                    reports.append(rep)
                    where = f"trial={trial} cell={cell} decoder={decoder} T={T}"
                    if not rep.passed:
                        failures.append(f"{where}: {rep.failure_message()}")
                    if rep.oracle_ops != T * (T + 1) // 2 or rep.engine_ops != T:
                        failures.append(f"{where}: op counts {rep.oracle_ops}/{rep.engine_ops}")
    return reports, failures


def cmd_verify(args) -> int:
    out = Path(args.out)
    config = {"max_length": args.max_length, "trials": args.trials,
              "tolerance": args.tolerance, "grad_tolerance": args.grad_tolerance}
    manifest = RunManifest(out / "manifest.json", "verify", config, {"seed": args.seed},
                           artifacts=[out / "equivalence.csv"])
    reports, failures = run_verification(args.max_length, args.trials, args.seed,
                                         args.tolerance, args.grad_tolerance)
    path = out / "equivalence.csv"
    path.write_text(report_csv(reports), encoding="utf-8")
    manifest.completed(path)
    worst = max((max(r.max_dev) for r in reports), default=0.0)
    worst_grad = max((r.max_grad_dev for r in reports), default=0.0)
    print(f"checks={len(reports)} max_dev={worst:.3e} max_grad_dev={worst_grad:.3e}")
    if failures:
        for line in failures[:10]:
            print(line)
        print(f"FAIL ({len(failures)} failing checks) report={path}")
        manifest.finish("fail")
        return EXIT_VERIFY
    print("PASS")
    manifest.finish()
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return values


def cmd_bench(args) -> int:
    out = Path(args.out)
    manifest = RunManifest(out / "manifest.json", "bench",
                           {"lengths": args.lengths, "reps": args.reps, "cities": args.cities},
                           {"seed": args.seed}, artifacts=[out / "complexity.csv"])
    with tc.precision(64):
        rng = np.random.default_rng(args.seed)
        cards = [args.cities, 200, 200, 200, 32, 13, 5, 32, 32, 32, 4, 32, 1000, 1000]
        params = random_params(ModelConfig(), cards, rng, scale=0.1)
        rows = benchmark_complexity(args.lengths, params, args.reps, args.seed)
    lines = ["T,oracle_ops,engine_ops,op_ratio,oracle_seconds,engine_seconds,time_ratio"]
    lines += [f"{r.steps},{r.oracle_ops},{r.engine_ops},{r.op_ratio:g},"
              f"{r.oracle_seconds:.6f},{r.engine_seconds:.6f},{r.time_ratio:.2f}" for r in rows]
    (out / "complexity.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.completed(out / "complexity.csv")
    print("\n".join(lines))
    manifest.finish()
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic booking CSV")
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--cities", type=int, required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--within-block", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="parse booking CSVs and report trip lengths")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--lenient", action="store_true", help="skip malformed rows")
    p.add_argument("--out", default="runs/stats")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("--data", nargs="+", required=True,
                   help="one or more CSVs; several files are concatenated")
    p.add_argument("--config", help="key=value file; flags take precedence")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--model", choices=("m2m", "m2o"))
    p.add_argument("--cell", choices=("gru", "lstm"))
    p.add_argument("--decoder", choices=("tied", "ff"))
    p.add_argument("--weighting", choices=("on", "off"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@k of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-4 next-city recommendations")
    p.add_argument("--run", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="many-to-many vs prefix many-to-one equivalence")
    p.add_argument("--max-length", type=int, default=16)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--grad-tolerance", type=float, default=1e-7)
    p.add_argument("--out", default="runs/verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="sequential cell steps and wall time, both paths")
    p.add_argument("--lengths", type=_int_list, default=[1, 4, 16, 48])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--cities", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", "absent") is None:
        args.seed = _default_seed()
    for name in ("sessions", "max_length", "trials", "reps", "k", "jobs"):
        if getattr(args, name, 1) < (0 if name == "sessions" else 1):
            parser.error(f"--{name.replace('_', '-')} is out of range")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"sse: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, RowError, OSError, ValueError) as err:
        print(f"sse: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
