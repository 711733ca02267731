"""``ppshare`` command line: synth, train, prune, verify, graph, eval, compare, bench.

Exit codes: 0 success, 2 usage/config/file error, 3 runtime invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from .errors import InvariantViolation, PPShareError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 2, 3
RUN_KEYS = {"seed", "train", "prune"}


class UsageError(Exception):
    pass


def _load_run_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("run config must be a JSON object")
    unknown = set(obj) - RUN_KEYS
    if unknown:
        raise ValidationError(f"unknown run-config keys: {sorted(unknown)}")
    return obj


def _write_snapshot(out, command, args, resolved):
    snap = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "resolved": resolved,
        "meta": {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }
    with open(Path(out) / "run_config.json", "w") as fh:
        json.dump(snap, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _train_config(args, run):
    from .trainer import TrainConfig

    base = dict(run.get("train", {}))
    if "seed" in run:
        base.setdefault("seed", run["seed"])
    overrides = {
        "epochs": args.epochs, "seed": args.seed, "protos_per_class": args.protos_per_class,
        "lr_head": getattr(args, "lr_head", None), "lr_protos": getattr(args, "lr_protos", None),
    }
    if getattr(args, "add_on", False):
        overrides["add_on"] = True
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


# -- subcommands --------------------------------------------------------

def cmd_synth(args):
    from .features import SynthSpec, save_dataset, synthesize

    spec = SynthSpec.from_json(args.spec)
    train, val, plan = synthesize(spec, args.seed)
    out = _outdir(args.out)
    save_dataset(train, out / "train.pfm")
    save_dataset(val, out / "val.pfm")
    with open(out / "plan.json", "w") as fh:
        json.dump(plan, fh, indent=1)
        fh.write("\n")
    _write_snapshot(out, "synth", args, {"spec": spec.to_dict(), "seed": args.seed})
    print(f"wrote {out / 'train.pfm'} ({train.N} images), {out / 'val.pfm'} ({val.N} images)")
    return EXIT_OK


def _write_history(history, path):
    cols = ["epoch", "ce", "clst", "sep", "l1", "train_acc", "val_acc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def cmd_train(args):
    from .features import load_dataset
    from .model import save_model
    from .trainer import train_phase1

    run = _load_run_config(args.config)
    cfg = _train_config(args, run)
    train = load_dataset(args.features)
    val = load_dataset(args.val) if args.val else None
    model, history = train_phase1(train, cfg, val)
    out = _outdir(args.out)
    save_model(model, out / "model.json")
    _write_history(history, out / "history.csv")
    _write_snapshot(out, "train", args, {"train": cfg.to_dict()})
    last = history[-1] if history else None
    if last:
        print(f"epoch {last['epoch']}: train_acc={last['train_acc']:.4f} val_acc={last['val_acc']:.4f}")
    return EXIT_OK


def cmd_prune(args):
    from .features import load_dataset
    from .model import load_model, save_model
    from .prune import PruneConfig, prune

    run = _load_run_config(args.config)
    tcfg = _train_config(args, run)
    pdict = dict(run.get("prune", {}))
    if "seed" in run:
        pdict.setdefault("seed", run["seed"])
    flags = {"zeta": args.zeta, "steps": args.steps, "target_size": args.target_size,
             "strategy": args.strategy, "finetune_iters": args.finetune_iters,
             "finetune_strategy": args.finetune_strategy, "seed": args.seed,
             "stop_on_val_drop": args.stop_on_val_drop}
    pdict.update({k: v for k, v in flags.items() if v is not None})
    if args.inter_class_only:
        pdict["inter_class_only"] = True
    if args.rerank_each_merge:
        pdict["rerank_each_merge"] = True
    model = load_model(args.model)
    if pdict.get("steps") is None and pdict.get("target_size") is None:
        pdict["steps"] = 1
    pcfg = PruneConfig.from_dict(pdict)
    train = load_dataset(args.features)
    val = load_dataset(args.val) if args.val else None
    pruned, plog = prune(model, train, val, pcfg, tcfg)
    out = _outdir(args.out)
    save_model(pruned, out / "model.json")
    (out / "prune_log.jsonl").write_text(plog.to_jsonl())
    (out / "summary.csv").write_text(plog.summary_csv())
    _write_snapshot(out, "prune", args, {"prune": pcfg.to_dict(), "train": tcfg.to_dict()})
    print(f"pool {model.M} -> {pruned.M} in {len(plog.steps)} steps")
    return EXIT_OK


def cmd_verify(args):
    from .theorem import InstanceSpec, TheoremParams, sweep

    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    TheoremParams(args.delta)
    spec = InstanceSpec(K=args.classes, D=args.dim, protos_per_class=args.protos_per_class,
                        merged_per_class=args.merged_per_class, delta=args.delta)
    rows = sweep([args.delta], range(args.seed, args.seed + args.trials), spec)
    bad = [r for r in rows if not (r["assumptions"] and r["bounds"] and r["chain"])]
    print(f"{'delta':>6} {'trials':>7} {'assump':>7} {'bounds':>7} {'chain':>6} {'margin':>7} {'max_ratio':>10}")
    print(f"{args.delta:>6.3f} {len(rows):>7d} {sum(r['assumptions'] for r in rows):>7d} "
          f"{sum(r['bounds'] for r in rows):>7d} {sum(r['chain'] for r in rows):>6d} "
          f"{sum(r['margin_condition'] for r in rows):>7d} {max(r['max_ratio'] for r in rows):>10.4f}")
    for r in bad[:10]:
        print(f"  violation: seed={r['seed']} {r}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"delta": args.delta, "rows": rows}, fh, indent=1)
    print("PASS" if not bad else f"FAIL ({len(bad)} violations)")
    return EXIT_OK if not bad else 1


def cmd_graph(args):
    from .analysis import build_class_graph
    from .model import load_model

    g = build_class_graph(load_model(args.model))
    text = g.to_dot() if args.format == "dot" else g.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args):
    from .analysis import evaluate, patch_assignment_rate
    from .features import load_dataset
    from .model import load_model

    model = load_model(args.model)
    data = load_dataset(args.features)
    res = evaluate(model, data)
    res["assignment_rate"] = patch_assignment_rate(model, data, args.top)
    print(json.dumps(res if args.verbose else {k: res[k] for k in ("accuracy", "assignment_rate")}))
    return EXIT_OK


def cmd_compare(args):
    from .analysis import compare_strategies
    from .features import load_dataset
    from .model import load_model
    from .prune import PruneConfig

    run = _load_run_config(args.config)
    tcfg = _train_config(args, run)
    pdict = dict(run.get("prune", {}))
    pdict.update({k: v for k, v in {"zeta": args.zeta, "target_size": args.target_size,
                                    "steps": args.steps, "finetune_iters": args.finetune_iters}.items()
                  if v is not None})
    if pdict.get("steps") is None and pdict.get("target_size") is None:
        raise UsageError("compare needs --steps or --target-size")
    pcfg = PruneConfig.from_dict(pdict)
    model = load_model(args.model)
    train = load_dataset(args.features)
    val = load_dataset(args.val)
    comp = compare_strategies(model, train, val, pcfg, tcfg, strategies=args.strategies,
                              seeds=args.seeds, finetunes=args.finetunes, rate_n=args.top)
    out = _outdir(args.out)
    (out / "comparison.csv").write_text(comp.to_csv())
    _write_snapshot(out, "compare", args, {"prune": pcfg.to_dict(), "train": tcfg.to_dict()})
    print(comp.to_csv(), end="")
    return EXIT_OK


def cmd_bench(args):
    from .benchmark import BenchmarkConfig, run_benchmark

    cfg = BenchmarkConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    summaries, _ = run_benchmark(args.seeds, cfg, out=args.out)
    print(f"{'seed':>4} {'unpruned':>8} {'dd@50':>6} {'di@50':>6} {'rnd@50':>6} "
          f"{'z.05@70':>7} {'z.15@70':>7} {'h@70':>6} {'ph@70':>6} {'all@70':>6} {'rate0':>6} {'rateN':>6}")
    for s in summaries:
        a, z, f = s["acc_at_50"], s["acc_by_zeta"], s["acc_by_finetune"]
        print(f"{s['seed']:>4} {s['val_unpruned']:>8.3f} {a['dd']:>6.3f} {a['di']:>6.3f} {a['random']:>6.3f} "
              f"{z['0.05']:>7.3f} {z['0.15']:>7.3f} {f['h']:>6.3f} {f['ph']:>6.3f} {f['all']:>6.3f} "
              f"{s['rate_first']:>6.3f} {s['rate_final']:>6.3f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="run config JSON with optional 'seed', 'train', 'prune' sections")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--protos-per-class", type=int)
    p.add_argument("--lr-head", type=float)
    p.add_argument("--lr-protos", type=float)
    p.add_argument("--add-on", action="store_true", help="enable the add-on projection")


def build_parser():
    ap = argparse.ArgumentParser(prog="ppshare", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, help="worker threads (default: PPSHARE_THREADS or all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate planted-cluster train/val features")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="phase-1 training with exclusive prototypes")
    p.add_argument("features")
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="merge-prune a trained model")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--zeta", type=float)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--steps", type=int)
    group.add_argument("--target-size", type=int)
    p.add_argument("--strategy", choices=["dd", "di", "random"])
    p.add_argument("--finetune-iters", type=int)
    p.add_argument("--finetune-strategy", choices=["h", "ph", "all"])
    p.add_argument("--inter-class-only", action="store_true")
    p.add_argument("--rerank-each-merge", action="store_true")
    p.add_argument("--stop-on-val-drop", type=float)
    _add_train_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("verify", help="sweep constructed instances against the merge bounds")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--protos-per-class", type=int, default=3)
    p.add_argument("--merged-per-class", type=int, default=1)
    p.add_argument("--json", help="write per-trial rows here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("graph", help="export the class-sharing graph")
    p.add_argument("model")
    p.add_argument("--format", choices=["dot", "json"], default="dot")
    p.add_argument("--out")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("eval", help="accuracy and patch-assignment rate")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="prune one checkpoint under several strategies")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zeta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--target-size", type=int)
    p.add_argument("--finetune-iters", type=int)
    p.add_argument("--strategies", nargs="+", default=["dd", "di", "random"], choices=["dd", "di", "random"])
    p.add_argument("--finetunes", nargs="+", default=["h"], choices=["h", "ph", "all"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--top", type=int, default=5)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="run the planted-redundancy benchmark")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", help="directory for comparison.csv and summary.json")
    p.add_argument("--epochs", type=int, help="override phase-1 epochs (for quick runs)")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        os.environ["PPSHARE_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (UsageError, PPShareError, OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
