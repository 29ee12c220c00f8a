"""Command-line entry point: ``lipens <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data/file error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import experiment as exp
from .attacks import AttackConfig, run_attack
from .data import DataError, fetch_mnist
from .lipschitz import AscentConfig, analytic_bound, empirical_llc
from .nn import ARCHITECTURES, WeightFileError, build_architecture, load_network, save_network
from .training import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("lipens")


class UsageError(Exception):
    pass


def _data_cfg(location: str, subset: int | None, heldout_fraction: float) -> dict:
    p = Path(location)
    if p.is_dir():
        cfg = {"source": "mnist", "dir": str(p), "heldout_fraction": heldout_fraction}
        if subset:
            cfg["subset"] = subset
        return cfg
    if p.is_file():
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{p}: not valid JSON ({e})") from e
        if cfg.get("source") == "mnist" and "dir" in cfg and not Path(cfg["dir"]).is_absolute():
            cfg["dir"] = str(p.parent / cfg["dir"])
        cfg.setdefault("heldout_fraction", heldout_fraction)
        if subset:
            cfg["subset"] = subset
        return cfg
    raise DataError(f"{location}: no such dataset directory or manifest")


def _splits(args) -> exp.Splits:
    return exp.load_splits(_data_cfg(args.data, getattr(args, "subset", None), args.heldout_fraction), args.seed)


def _ascent(args) -> AscentConfig:
    return AscentConfig(steps=args.steps, step_fraction=args.step_fraction, restarts=args.restarts, seed=args.seed)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _anchors(args, splits: exp.Splits) -> np.ndarray:
    return splits.test.inputs[: args.anchors]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_base(args) -> int:
    splits = _splits(args)
    rng = np.random.default_rng(args.seed)
    net = build_architecture(args.arch, splits.train.dim, splits.train.class_count, rng, args.hidden)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, rng_seed=args.seed)
    net, hist = train(net, splits.train, cfg)
    net.meta = {"arch": args.arch, "hidden": args.hidden}
    save_network(net, args.out)
    summary = {
        "arch": args.arch,
        "out": str(args.out),
        "train_size": len(splits.train),
        "final_loss": hist[-1] if hist else None,
        "test_acc": evaluate(net, splits.test),
        "config": cfg.to_dict(),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_llc(args) -> int:
    model = ens.load_model(args.model)
    splits = _splits(args)
    anchors = _anchors(args, splits)
    rep = empirical_llc(model, anchors, args.eps, _ascent(args))
    doc = rep.to_dict(include_witnesses=args.witnesses)
    if hasattr(model, "layers"):
        doc["analytic_upper"] = analytic_bound(model).value
    _write(json.dumps(doc, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_build_ensemble(args) -> int:
    members = [load_network(p) for p in args.members]
    splits = _splits(args)
    anchors = _anchors(args, splits)
    cfg = _ascent(args)
    reports = ens.measure_member_llc(members, anchors, args.eps, cfg)
    if args.kind == "bag":
        if args.mode not in ens.BAG_MODES:
            raise UsageError(f"bagging mode must be one of {ens.BAG_MODES}")
        model = ens.build_bagged(members, anchors, args.eps, args.mode, cfg, reports)
    else:
        if args.mode not in ens.STACK_MODES:
            raise UsageError(f"stacking mode must be one of {ens.STACK_MODES}")
        tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, rng_seed=args.seed)
        meta = ens.train_meta(members, splits.heldout, tcfg, hidden=args.meta_hidden)
        model = ens.build_stacked(members, anchors, args.eps, args.mode, cfg=cfg, member_reports=reports, meta=meta)
    out = Path(args.out)
    member_paths = [str(Path(p).resolve()) for p in args.members]
    doc = ens.save_manifest(model, out, member_paths)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_attack(args) -> int:
    model = ens.load_model(args.model)
    splits = _splits(args)
    eval_set = splits.test.head(args.samples)
    clamp = None if args.no_clamp else (0.0, 1.0)
    if args.kind == "fgsm":
        cfg = AttackConfig.fgsm(args.eps, clamp=clamp)
    else:
        cfg = AttackConfig.pgd(args.eps, args.pgd_steps, args.eta, clamp=clamp)
    res = run_attack(model, eval_set, cfg)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        res.write_jsonl(args.out)
    summary = {
        "accuracy": res.accuracy,
        "clean_accuracy": res.clean_accuracy,
        "max_linf": float(res.linf.max()),
        "n": len(eval_set),
        "config": cfg.to_dict(),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _report_overrides(args) -> dict:
    over: dict = {}
    if args.data:
        over["data"] = _data_cfg(args.data, args.subset, 0.2) if Path(args.data).is_file() else {"dir": args.data}
        if args.subset and Path(args.data).is_dir():
            over["data"]["subset"] = args.subset
    if args.epochs is not None:
        over.setdefault("train", {})["epochs"] = args.epochs
    if args.anchors is not None:
        over.setdefault("llc", {})["anchors"] = args.anchors
    if args.samples is not None:
        over["attack_samples"] = args.samples
    return over


def cmd_report(args) -> int:
    file_cfg = None
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
    try:
        cfg = exp.resolve_config(args.experiment, file_cfg, _report_overrides(args))
    except ValueError as e:
        raise UsageError(str(e)) from e
    seeds = args.seeds if args.seeds else [args.seed]
    out = Path(args.out)
    reports = []
    for s in seeds:
        sub = out if len(seeds) == 1 else out / f"seed{s}"
        rep = exp.run_experiment(args.experiment, s, cfg, sub)
        reports.append(rep)
        log.info("seed %d done", s)
    if len(seeds) > 1:
        summary = exp.summarize(reports)
        (out / "summary.json").write_text(exp.dump_report(summary))
        print(exp.dump_report(summary), end="")
    else:
        print(exp.markdown_table(reports[0]), end="")
    return EXIT_OK


def cmd_fetch_mnist(args) -> int:
    path = fetch_mnist(args.dir)
    print(str(path))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data(p, required=True):
    p.add_argument("--data", required=required, help="MNIST IDX directory or dataset manifest (.json)")
    p.add_argument("--subset", type=int, default=None, help="train-split subsample size")
    p.add_argument("--heldout-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)


def _add_ascent(p):
    p.add_argument("--eps", type=float, default=0.1, help="LLC ball radius (L-inf)")
    p.add_argument("--anchors", type=int, default=200)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-fraction", type=float, default=0.1)
    p.add_argument("--restarts", type=int, default=10)


def _add_train(p, epochs=10):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipens", description="Lipschitz-aware ensembles of feed-forward networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train one base network")
    p.add_argument("--arch", required=True, choices=sorted(ARCHITECTURES))
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=256)
    _add_data(p)
    _add_train(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("llc", help="empirical local Lipschitz estimate of a model")
    p.add_argument("--model", required=True, help="weight file or ensemble manifest")
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.add_argument("--witnesses", action="store_true", help="include witness points")
    _add_data(p)
    _add_ascent(p)
    p.set_defaults(func=cmd_llc)

    p = sub.add_parser("build-ensemble", help="bag or stack trained members")
    p.add_argument("--kind", required=True, choices=["bag", "stack"])
    p.add_argument("--mode", default=ens.PROPOSED, choices=sorted(set(ens.BAG_MODES)))
    p.add_argument("--members", required=True, nargs="+")
    p.add_argument("--out", required=True, help="manifest path (.json)")
    p.add_argument("--meta-hidden", type=int, default=ens.META_HIDDEN)
    _add_data(p)
    _add_ascent(p)
    _add_train(p)
    p.set_defaults(func=cmd_build_ensemble)

    p = sub.add_parser("attack", help="FGSM / PGD accuracy of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--kind", required=True, choices=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--pgd-steps", type=int, default=40)
    p.add_argument("--eta", type=float, default=None, help="PGD step size (default eps/10)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--no-clamp", action="store_true", help="do not clamp to [0, 1]")
    p.add_argument("--out", default=None, help="per-sample JSONL")
    _add_data(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="run a named experiment end to end")
    p.add_argument("--experiment", default="table1-fnn-desk", choices=sorted(exp.DEFAULTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file (flags take precedence)")
    p.add_argument("--data", default=None)
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--anchors", type=int, default=None)
    p.add_argument("--samples", type=int, default=None, help="attack evaluation samples")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fetch-mnist", help="download and verify MNIST IDX files")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_fetch_mnist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"lipens: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WeightFileError, ens.EnsembleError, FileNotFoundError, OSError) as e:
        print(f"lipens: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as e:
        print(f"lipens: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
