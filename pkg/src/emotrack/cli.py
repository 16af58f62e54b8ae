"""Command-line entry point: ``emotrack <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Every command writes ``run_<command>.json`` into ``--out`` before any other
output; it records the argv needed to replay the run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_train_config, parse_kv, train_config_from_kv
from .data import DataError, SplitManifest, load_dataset, split_corpus
from .evaluation import EvalReport, evaluate, run_ablation
from .gradcheck import run_gradcheck, tiny_config
from .synthgen import GeneratorConfig, write_corpus
from .training import NumericError, prepare_examples, prepare_splits, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seeds(text):
    """'0..4' or '0,1,2'."""
    if text is None:
        return None
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc


def _out_dir(args):
    out = args.out or os.environ.get("EMOTRACK_OUT")
    if not out:
        raise UsageError("--out is required (or set EMOTRACK_OUT)")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _write_run_manifest(out, command, argv, config=None, seeds=None, inputs=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": inputs or {},
        "out": str(out),
        "version": __version__,
    }
    (out / f"run_{command}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args):
    values = parse_kv(Path(args.config).read_text(), args.config) if args.config else {}
    values.update(_overrides(args))
    return train_config_from_kv(values)


def _load_inputs(args, cfg: TrainConfig):
    corpus = load_dataset(args.data)
    manifest = SplitManifest.load(args.manifest)
    if corpus.d_e != cfg.model.d_e or corpus.F != cfg.model.F:
        raise DataError(f"corpus {args.data} has d_e={corpus.d_e}, F={corpus.F}; "
                        f"config expects d_e={cfg.model.d_e}, F={cfg.model.F}")
    return corpus, manifest


# -- commands --------------------------------------------------------------------

def cmd_gen_fixtures(args, argv):
    text = Path(args.config).read_text() if args.config else ""
    gcfg = GeneratorConfig.from_kv(text, args.config or "<defaults>")
    if args.seed is not None:
        gcfg = dataclasses.replace(gcfg, seed=args.seed)
    out = _out_dir(args)
    _write_run_manifest(out, "gen-fixtures", argv, config=gcfg.to_kv(), seeds=[gcfg.seed],
                        inputs={"config": args.config})
    paths = write_corpus(gcfg, out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_train(args, argv):
    cfg = _train_config(args)
    seeds = parse_seeds(args.seeds) or [args.seed if args.seed is not None else cfg.seed]
    out = _out_dir(args)
    _write_run_manifest(out, "train", argv, config=cfg.to_dict(), seeds=seeds,
                        inputs={"data": args.data, "manifest": args.manifest, "config": args.config})
    corpus, manifest = _load_inputs(args, cfg)
    for seed in seeds:
        scfg = cfg.replace(seed=seed)
        prep = prepare_splits(corpus, manifest, scfg)
        res = train(prep.train, prep.val, scfg, seed=seed, log_path=out / f"train_log_seed{seed}.jsonl")
        path = out / f"checkpoint_seed{seed}.emck"
        save_checkpoint(path, Checkpoint(res.params, scfg, seed, prep.stats, res.best_epoch))
        last = res.log[-1]
        print(f"seed {seed}: best epoch {res.best_epoch}, epochs run {last['epoch']}, checkpoint {path}")
    return EXIT_OK


def _checkpoint_paths(args):
    paths = []
    for c in args.checkpoint:
        p = Path(c)
        if p.is_dir():
            seeds = parse_seeds(args.seeds)
            found = ([p / f"checkpoint_seed{s}.emck" for s in seeds] if seeds
                     else sorted(p.glob("checkpoint_seed*.emck")))
            paths.extend(found)
        else:
            paths.append(p)
    if not paths:
        raise UsageError("no checkpoints found")
    return paths


def cmd_eval(args, argv):
    paths = _checkpoint_paths(args)
    out = _out_dir(args)
    _write_run_manifest(out, "eval", argv, seeds=parse_seeds(args.seeds),
                        inputs={"checkpoints": [str(p) for p in paths], "data": args.data,
                                "manifest": args.manifest, "split": args.split})
    corpus = load_dataset(args.data)
    manifest = SplitManifest.load(args.manifest)
    results = []
    fingerprint = None
    for p in paths:
        if not p.exists():
            raise DataError(f"checkpoint {p} does not exist")
        ck = load_checkpoint(p)
        mc = ck.config.model
        if corpus.d_e != mc.d_e or corpus.F != mc.F:
            raise DataError(f"checkpoint {p} expects d_e={mc.d_e}, F={mc.F} but corpus {args.data} "
                            f"has d_e={corpus.d_e}, F={corpus.F}")
        parts = split_corpus(corpus, manifest)
        if not parts[args.split]:
            raise DataError(f"{args.split} split is empty")
        examples = prepare_examples(parts[args.split], ck.stats, ck.config)
        if any(e.target_total is None for e in examples):
            raise DataError(f"{args.split} split has sessions without labels or latent items")
        results.append(evaluate(ck.params, ck.config, examples, ck.seed))
        fingerprint = ck.config.fingerprint()
    report = EvalReport.from_seeds(results, fingerprint)
    (out / "report.json").write_text(report.to_json())
    std = "" if report.std is None else f" +- {report.std:.4f}"
    print(f"MAE {report.mean:.4f}{std} over {len(results)} checkpoint(s)")
    return EXIT_OK


def cmd_gradcheck(args, argv):
    cfg = tiny_config()
    if args.config or args.set:
        values = parse_kv(Path(args.config).read_text(), args.config) if args.config else {}
        values.update(_overrides(args))
        cfg = train_config_from_kv(values, base=cfg)
    seed = args.seed if args.seed is not None else 0
    if args.out or os.environ.get("EMOTRACK_OUT"):
        out = _out_dir(args)
        _write_run_manifest(out, "gradcheck", argv, config=cfg.to_dict(), seeds=[seed])
    try:
        report = run_gradcheck(cfg, seed, corrupt=args.corrupt)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    lines = report.lines()
    print("\n".join(lines))
    if args.out or os.environ.get("EMOTRACK_OUT"):
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if not report.passed:
        print(f"gradient check failed: worst parameter {report.worst_param} "
              f"relative error {report.worst_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args, argv):
    cfg = _train_config(args)
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    seeds = parse_seeds(args.seeds) or [args.seed if args.seed is not None else cfg.seed]
    out = _out_dir(args)
    _write_run_manifest(out, "ablate", argv, config=cfg.to_dict(), seeds=seeds,
                        inputs={"data": args.data, "manifest": args.manifest, "axis": args.axis, "grid": grid})
    corpus, manifest = _load_inputs(args, cfg)
    try:
        table = run_ablation(args.axis, grid, cfg, corpus, manifest, seeds, jobs=args.jobs)
    except ValueError as exc:
        if "axis" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    stem = "ablation_" + args.axis.replace("/", "_")
    (out / f"{stem}.csv").write_text(table.to_csv())
    (out / f"{stem}.json").write_text(table.to_json())
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.run_manifest).read_text())
    return main(manifest["argv"])


# -- parser ---------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="emotrack", description="Train and evaluate PHQ-8 severity predictors.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help="output directory (default $EMOTRACK_OUT)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", help="seed list: 0..4 or 0,1,2")
        if data:
            sp.add_argument("--data", required=True, help="session JSONL corpus")
            sp.add_argument("--manifest", required=True, help="split manifest JSON")

    g = sub.add_parser("gen-fixtures", help="write a synthetic corpus and split manifest")
    g.add_argument("--config", help="generator key = value file")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_fixtures)

    t = sub.add_parser("train", help="train one checkpoint per seed")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on a split")
    e.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or a directory")
    e.add_argument("--data", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--seeds")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    common(c, data=False)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train/evaluate over one ablation axis")
    common(a)
    a.add_argument("--axis", required=True)
    a.add_argument("--grid", required=True, help="comma-separated values")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("replay", help="re-run a command from its run manifest")
    r.add_argument("run_manifest")
    r.set_defaults(func=cmd_replay)
    return p


def _limit_threads():
    n = os.environ.get("EMOTRACK_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(int(n))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _limit_threads()
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
