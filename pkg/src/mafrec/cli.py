"""Command-line entry point: ``mafrec <command> [options]``.

Every command writes into a fresh run directory under ``--out`` together
with a ``manifest.json`` (command line, resolved configuration, SHA-256 of
the inputs, output paths, wall-clock time and seed).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from .config import TrainConfig, check_keys, coerce_value, read_flat, resolve_config, write_flat
from .data import (DataError, filter_corpus, leave_one_out, load_corpus, load_prepared, save_prepared,
                   window, write_split)
from .evaluator import MetricsReport, evaluate
from .model import batch_from_ids, as_leaves, forward
from .synthetic import SynthSpec, generate, oracle_rank
from .trainer import CheckpointError, evaluate_checkpoint, grid_search, load_checkpoint, train

log = logging.getLogger("mafrec")


class CLIError(Exception):
    """User-facing failure; printed without a traceback."""


# ---------------------------------------------------------------------------
# run directories and manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fresh_run_dir(root: str | Path, command: str) -> Path:
    """``root/<command>-<UTC timestamp>[-k]``; an existing directory is never reused."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = root / f"{command}-{stamp}"
    path, k = base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            k += 1
            path = Path(f"{base}-{k}")


class Run:
    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.dir = fresh_run_dir(args.out, command)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.config: dict[str, Any] = {}
        self.seed: int | None = args.seed
        self.t0 = time.perf_counter()

    def input(self, path: str | Path) -> Path:
        path = Path(path)
        if path.is_dir():
            for f in sorted(p for p in path.iterdir() if p.is_file()):
                self.inputs[str(f)] = sha256_file(f)
        elif path.exists():
            self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, name: str, path: str | Path) -> Path:
        self.outputs[name] = str(path)
        return Path(path)

    def finish(self) -> Path:
        for name, path in self.outputs.items():
            if not Path(path).exists():
                raise CLIError(f"expected output {name} was not written: {path}")
        manifest = {
            "command": ["mafrec"] + list(self.args.argv),
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": time.perf_counter() - self.t0,
            "seed": self.seed,
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# commands


def _stats_table(stats: dict[str, float], name: str) -> str:
    rows = [("Dataset", name), ("#Users", f"{stats['users']:,}"), ("#Items", f"{stats['items']:,}"),
            ("Avg. Actions/User", f"{stats['avg_actions_per_user']:.2f}"),
            ("Avg. Actions/Item", f"{stats['avg_actions_per_item']:.2f}"),
            ("#Interactions", f"{stats['interactions']:,}")]
    return "\n".join(f"{k:<18}\t{v}" for k, v in rows)


def _write_stats(stats: dict[str, float], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in stats.items():
            fh.write(f"{k}\t{v!r}\n")


def cmd_prepare(args, run: Run) -> None:
    files = {"image": args.image, "text": args.text, "category": args.category}
    for mod, path in files.items():
        if path is None:
            raise CLIError(f"missing feature file for modality {mod!r} (use --{mod})")
    run.input(args.interactions)
    for path in files.values():
        run.input(path)
    raw_log, store = load_corpus(args.interactions, files)
    corpus = filter_corpus(raw_log, store, args.min_interactions)
    split = leave_one_out(corpus.log)
    paths = save_prepared(corpus, run.dir / "data")
    for name, p in paths.items():
        run.output(name, p)
    write_split(split, run.output("split", run.dir / "data" / "split.tsv"))
    stats = corpus.stats()
    _write_stats(stats, run.output("stats", run.dir / "stats.tsv"))
    run.config = {"min_interactions": args.min_interactions}
    print(_stats_table(stats, args.name or Path(args.interactions).stem))


def cmd_synth(args, run: Run) -> None:
    values = read_flat(run.input(args.spec)) if args.spec else {}
    values.update(dict(_pairs(args.set)))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    try:
        spec = SynthSpec.from_flat(values)
    except KeyError as exc:
        raise CLIError(exc.args[0]) from None
    run.seed = spec.seed
    run.config = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    sc = generate(spec)
    corpus = sc.to_corpus()
    for name, p in sc.write(run.dir / "data").items():
        run.output(name, p)
    split = leave_one_out(corpus.log)
    write_split(split, run.output("split", run.dir / "data" / "split.tsv"))
    oracle = run.output("oracle", run.dir / "oracle.tsv")
    with open(oracle, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("info\tk\tbayes_recall\n")
        for info in ("full", "id"):
            rep = oracle_rank(corpus.log, sc.truth, "test", (1, 10, 20), info)
            for k, v in rep.bayes_recall.items():
                fh.write(f"{info}\t{k}\t{v!r}\n")
                print(f"bayes recall@{k} ({info}): {v:.4f}")
    print(_stats_table(corpus.stats(), "synthetic"))


def _pairs(items: list[str] | None) -> list[tuple[str, str]]:
    out = []
    for item in items or []:
        if "=" not in item:
            raise CLIError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def _train_config(args, run: Run) -> TrainConfig:
    file_values = read_flat(run.input(args.config)) if args.config else {}
    overrides: dict[str, Any] = dict(_pairs(getattr(args, "set", None)))
    for flag, key in (("fusion", "fusion"), ("modalities", "modalities"), ("lam", "lam"),
                      ("epochs", "epochs"), ("lr", "lr"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        cfg = resolve_config(file_values, overrides)
    except KeyError as exc:
        raise CLIError(exc.args[0]) from None
    run.seed = cfg.seed
    run.config = cfg.to_dict()
    return cfg


def _load_data(path: str, run: Run):
    corpus = load_prepared(run.input(path))
    return corpus, leave_one_out(corpus.log)


def _report(report: MetricsReport, path: Path, title: str) -> None:
    report.write(path)
    print(report.table(title))


def cmd_train(args, run: Run) -> None:
    cfg = _train_config(args, run)
    corpus, split = _load_data(args.data, run)
    write_flat(cfg, run.output("config", run.dir / "config.txt"))
    result = train(cfg, corpus, split, out_dir=run.dir)
    run.output("train_log", run.dir / "train_log.tsv")
    run.output("best", run.dir / "best.ckpt")
    run.output("final", run.dir / "final.ckpt")
    report = evaluate_checkpoint(result.best, corpus, split, "test", args.ks)
    _report(report, run.output("report", run.dir / "report.tsv"), args.name or "MAF")


def cmd_evaluate(args, run: Run) -> None:
    ckpt = load_checkpoint(run.input(args.checkpoint))
    corpus, split = _load_data(args.data, run)
    run.seed = ckpt.config.seed
    run.config = ckpt.config.to_dict()
    report = evaluate(ckpt.scorer(corpus), corpus, split, args.role, args.ks, ckpt.config.n,
                      exclude_history=args.exclude_history)
    _report(report, run.output("report", run.dir / "report.tsv"), args.name or "MAF")


def cmd_grid(args, run: Run) -> None:
    cfg = _train_config(args, run)
    corpus, split = _load_data(args.data, run)
    grids: dict[str, list] = {}
    for key, values in _pairs(args.grid):
        try:
            check_keys({key: None})
        except KeyError as exc:
            raise CLIError(exc.args[0]) from None
        grids[key] = [coerce_value(key, v) for v in values.split("|" if key == "modalities" else ",")]
    if not grids:
        raise CLIError("grid needs at least one --grid key=v1,v2,...")
    result = grid_search(cfg, grids, corpus, split)
    with open(run.output("grid", run.dir / "grid.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(result.lines()) + "\n")
    write_flat(result.best_config, run.output("best_config", run.dir / "best_config.txt"))
    print("\n".join(result.lines()))
    print(f"best val recall@10 {result.best_metric:.4f}")


def _blank_csv(path: Path, matrix: np.ndarray, keep: np.ndarray, positions: list[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position"] + positions)
        for r, pos in enumerate(positions):
            w.writerow([pos] + [repr(float(matrix[r, c])) if keep[r, c] else "" for c in range(len(positions))])


def cmd_export_attention(args, run: Run) -> None:
    ckpt = load_checkpoint(run.input(args.checkpoint))
    corpus, split = _load_data(args.data, run)
    cfg = ckpt.config
    run.seed, run.config = cfg.seed, cfg.to_dict()
    if not 0 <= args.layer < cfg.blocks:
        raise CLIError(f"layer {args.layer} out of range 0..{cfg.blocks - 1}")
    if not 0 <= args.head < cfg.heads:
        raise CLIError(f"head {args.head} out of range 0..{cfg.heads - 1}")
    if args.user not in split.train_prefix:
        raise CLIError(f"unknown user {args.user!r}")
    hist = split.history(args.user, args.role)
    ids = window(hist, cfg.n)[None, :]
    batch = batch_from_ids(corpus, ids, np.ones(1, dtype=np.int64))
    out = forward(as_leaves(ckpt.params), batch, cfg, trace=True)
    item, multi, fused = out.traces[args.layer].head(args.head)
    mask = out.traces[args.layer].mask[0, 0]
    real = np.flatnonzero(ids[0] != 0)
    if args.last is not None:
        if args.last < 1:
            raise CLIError("--last must be positive")
        real = real[-args.last:]
    sub = np.ix_(real, real)
    keep = mask[sub]
    # positions count from 1 at the oldest item in the window
    offset = cfg.n - np.count_nonzero(ids[0])
    positions = [int(p - offset + 1) for p in real]
    for name, m in (("item_scores", item), ("multimodal_scores", multi), ("fused", fused)):
        _blank_csv(run.output(name, run.dir / f"{name}.csv"), m[sub], keep, positions)
    print(f"wrote attention matrices for user {args.user} layer {args.layer} head {args.head} to {run.dir}")


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "export-attention": cmd_export_attention,
}


# ---------------------------------------------------------------------------
# argument parsing


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")
    common.add_argument("--config", default=None, help="flat 'key = value' config file")
    common.add_argument("--out", default="runs", help="root directory for run directories")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", required=True, help="prepared corpus directory")
    model.add_argument("--fusion", choices=("sum", "concat", "gate"))
    model.add_argument("--modalities", help="'all', 'none' or a comma list of image,text,category")
    model.add_argument("--lambda", dest="lam", help="multitask weight")
    model.add_argument("--epochs")
    model.add_argument("--lr")
    model.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key")

    p = argparse.ArgumentParser(prog="mafrec", description="Multimodal attention-fusion recommender")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", parents=[common], help="filter, remap and split a raw corpus")
    sp.add_argument("--interactions", required=True)
    sp.add_argument("--image")
    sp.add_argument("--text")
    sp.add_argument("--category")
    sp.add_argument("--min-interactions", type=int, default=5)
    sp.add_argument("--name", default=None)

    sp = sub.add_parser("synth", parents=[common], help="generate a planted-pattern corpus")
    sp.add_argument("--spec", default=None, help="flat 'key = value' synthetic spec")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")

    sp = sub.add_parser("train", parents=[common, model], help="train and report test metrics")
    sp.add_argument("--ks", type=_ks, default=(10, 20))
    sp.add_argument("--name", default=None)

    sp = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--role", choices=("test", "validation"), default="test")
    sp.add_argument("--ks", type=_ks, default=(10, 20))
    sp.add_argument("--exclude-history", action="store_true")
    sp.add_argument("--name", default=None)

    sp = sub.add_parser("grid", parents=[common, model], help="grid search on validation Recall@10")
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                    help="values to try (modalities use '|' between options)")

    sp = sub.add_parser("export-attention", parents=[common], help="write attention matrices as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--user", required=True)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--head", type=int, default=0)
    sp.add_argument("--role", choices=("test", "validation"), default="test")
    sp.add_argument("--last", type=int, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        run = Run(args, args.command)
        COMMANDS[args.command](args, run)
        run.finish()
    except (CLIError, DataError, CheckpointError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mafrec {args.command}: error: {msg}", file=sys.stderr)
        if run is not None:
            # a failed run leaves no half-written run directory behind
            shutil.rmtree(run.dir, ignore_errors=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
