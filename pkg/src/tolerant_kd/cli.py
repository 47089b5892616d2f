"""Command-line entry point: ``tolerant-kd <command> ...``.

Commands: ``gen-data``, ``run-process``, ``metrics``, ``ensemble``. Every
command writes a ``run_manifest.json`` into its output directory (ensemble: only
with ``--out``). Exit status is 0 on success, 2 on usage errors and 1 on
runtime failures.
"""
import argparse
import datetime
import json
import logging
import os
import sys
import warnings

from . import __version__, data as data_mod, metrics
from .generations import (
    DEFAULT_LR,
    ProcessConfig,
    ProcessStateError,
    load_process,
    prefix_ensemble_accuracy,
    run_process,
)
from .model import SgdConfig

TRAIN_FILE = "train.tkd"
TEST_FILE = "test.tkd"
MANIFEST_FILE = "run_manifest.json"


class UsageError(Exception):
    pass


def write_manifest(out_dir, command, config, seed, artifacts):
    """Reproduction record; the timestamp is isolated on its own line."""
    body = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
    }
    lines = json.dumps(body, indent=1, sort_keys=True).splitlines()
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    lines.insert(1, f' "created": "{stamp}",')
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def emit(args, summary, human):
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(human)


def load_split(data_dir, split):
    return data_mod.load(os.path.join(data_dir, TRAIN_FILE if split == "train" else TEST_FILE))


def cmd_gen_data(args):
    try:
        spec = data_mod.SynthSpec(
            superclasses=args.superclasses,
            fine_per_super=args.fine_per_super,
            dim=args.dim,
            n_train=args.n_train,
            n_test=args.n_test,
            sigma_super=args.sigma_super,
            sigma_fine=args.sigma_fine,
            sigma_noise=args.sigma_noise,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train, test = data_mod.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, TRAIN_FILE), os.path.join(args.out, TEST_FILE)]
    data_mod.save(train, paths[0])
    data_mod.save(test, paths[1])
    cfg = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    write_manifest(args.out, "gen-data", cfg, args.seed, paths)
    summary = {
        "classes": spec.num_classes,
        "superclasses": spec.superclasses,
        "dim": spec.dim,
        "train_rows": len(train),
        "test_rows": len(test),
        "train_per_class": int(train.class_counts().min()),
        "test_per_class": int(test.class_counts().min()),
        "feature_std_mean": float(train.features.std(axis=0).mean()),
    }
    emit(args, summary, "\n".join(f"{k}: {v}" for k, v in summary.items()))


def cmd_run_process(args):
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (32,)
    try:
        sgd = SgdConfig.for_epochs(
            args.epochs,
            base_lr=args.lr,
            momentum=args.momentum,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
        )
        cfg = ProcessConfig(
            u=args.u,
            lam=args.lam,
            K=args.K,
            generations=args.generations,
            patriarch=args.patriarch,
            hidden_dims=hidden,
            sgd=sgd,
            seed=args.seed,
            eps=args.eps,
            beta=args.beta,
            teacher_checkpoint=args.teacher_checkpoint,
            include_patriarch_in_ensemble=args.include_patriarch,
            cache_teacher=args.cache_teacher,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if os.path.exists(args.out) and os.listdir(args.out) and not args.resume:
        raise ProcessStateError(f"{args.out} exists; use --resume to continue it")
    train, test = load_split(args.data, "train"), load_split(args.data, "test")
    record = run_process(cfg, train, test, args.out, resume=args.resume)
    artifacts = [os.path.join(args.out, "process.json")]
    for g in record.generations:
        artifacts += [os.path.join(args.out, g.best_checkpoint), os.path.join(args.out, g.last_checkpoint)]
    write_manifest(args.out, "run-process", cfg.to_dict(), cfg.seed, artifacts)
    rows = [
        {"m": g.m, "best_test_acc": g.best_test_acc, "last_test_acc": g.last_test_acc,
         "train_top1_confidence": g.train_top1_confidence}
        for g in record.generations
    ]
    summary = {"generations": rows, "ensemble_test_acc": record.ensemble_test_acc}
    human = [f"D({cfg.u}, {cfg.lam})  K={cfg.K}  patriarch={cfg.patriarch}"]
    human += [
        f"gen {r['m']}: best {r['best_test_acc']:.4f}  last {r['last_test_acc']:.4f}  "
        f"top1-conf {r['train_top1_confidence']:.4f}"
        for r in rows
    ]
    human += [f"ensemble of {i + 1}: {a:.4f}" for i, a in enumerate(record.ensemble_test_acc)]
    emit(args, summary, "\n".join(human))


def _metrics_for(ckpt, splits, reports, k, out_dir):
    written, summary = [], {}
    if "topk" in reports:
        text = ""
        for name, ds in splits:
            st = metrics.topk_stats(ckpt, ds, k)
            text += st.to_text(prefix=f"{name}.")
            summary[f"{name}.topk"] = st.means.tolist()
        written.append(_write(out_dir, "topk.txt", text))
    if "confusion" in reports:
        for name, ds in splits:
            mat = metrics.second_choice_confusion(ckpt, ds)
            fname = "confusion.csv" if len(splits) == 1 else f"confusion_{name}.csv"
            written.append(_write(out_dir, fname, mat.to_csv()))
            summary[f"{name}.within_superclass_fraction"] = metrics.within_superclass_fraction(mat, ds.super_of)
    if "distance" in reports:
        text = ""
        for name, ds in splits:
            rep = metrics.distance_metrics(ckpt, ds)
            text += rep.to_text()
            summary[f"{name}.dist_c"] = rep.dist_c
            summary[f"{name}.dist_s"] = rep.dist_s
        written.append(_write(out_dir, "distance.txt", text))
    return written, summary


def _write(out_dir, name, text):
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        f.write(text)
    return path


def cmd_metrics(args):
    for c in args.checkpoint:
        if not os.path.exists(c):
            raise FileNotFoundError(f"checkpoint not found: {c}")
    names = ["train", "test"] if args.split == "both" else [args.split]
    splits = [(n, load_split(args.data, n)) for n in names]
    reports = ["topk", "confusion", "distance"] if args.report == "all" else [args.report]
    if args.k > splits[0][1].num_classes:
        raise UsageError(f"--k {args.k} exceeds the number of classes")
    os.makedirs(args.out, exist_ok=True)
    written, summary = [], {}
    for i, ckpt in enumerate(args.checkpoint):
        sub = args.out if len(args.checkpoint) == 1 else os.path.join(args.out, f"ckpt_{i}")
        os.makedirs(sub, exist_ok=True)
        w, s = _metrics_for(ckpt, splits, reports, args.k, sub)
        written += w
        summary[ckpt] = s
    cfg = {"checkpoint": list(args.checkpoint), "report": args.report, "k": args.k, "split": args.split}
    write_manifest(args.out, "metrics", cfg, None, written)
    human = []
    for ckpt, s in summary.items():
        human.append(ckpt)
        human += [f"  {k}: {v}" for k, v in s.items()]
    emit(args, summary, "\n".join(human))


def cmd_ensemble(args):
    if args.to_gen < args.from_gen:
        raise UsageError(f"empty generation range {args.from_gen}..{args.to_gen}")
    record = load_process(args.process)
    gens = {g.m: g for g in record.generations}
    missing = [m for m in range(args.from_gen, args.to_gen + 1) if m not in gens]
    if missing:
        raise UsageError(f"generations {missing} are not part of {args.process}")
    ckpts = [os.path.join(args.process, gens[m].last_checkpoint) for m in range(args.from_gen, args.to_gen + 1)]
    ds = load_split(args.data, args.split)
    accs = prefix_ensemble_accuracy(ckpts, ds)
    summary = {
        "split": args.split,
        "from_gen": args.from_gen,
        "to_gen": args.to_gen,
        "prefix_accuracy": accs,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        text = "".join(f"models={i + 1} acc={a!r}\n" for i, a in enumerate(accs))
        path = _write(args.out, "ensemble.txt", text)
        write_manifest(args.out, "ensemble", {k: v for k, v in summary.items() if k != "prefix_accuracy"}, None, [path])
    human = [f"gens {args.from_gen}..{args.from_gen + i}: {a:.4f}" for i, a in enumerate(accs)]
    emit(args, summary, "\n".join(human))


def build_parser():
    p = argparse.ArgumentParser(prog="tolerant-kd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="machine-readable summary on stdout")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen-data", help="generate a synthetic hierarchical dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--superclasses", type=int, default=20)
    g.add_argument("--fine-per-super", type=int, default=5)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--n-train", type=int, default=100, help="training rows per fine class")
    g.add_argument("--n-test", type=int, default=20, help="test rows per fine class")
    defaults = data_mod.SynthSpec.__dataclass_fields__
    g.add_argument("--sigma-super", type=float, default=defaults["sigma_super"].default)
    g.add_argument("--sigma-fine", type=float, default=defaults["sigma_fine"].default)
    g.add_argument("--sigma-noise", type=float, default=defaults["sigma_noise"].default)
    g.add_argument("--seed", type=int, default=0)
    common(g)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run-process", help="train a patriarch and its student generations")
    r.add_argument("--data", required=True, help="directory written by gen-data")
    r.add_argument("--out", required=True)
    r.add_argument("--u", type=float, default=0.6, help="target top-1 confidence; 1.0 = plain CE")
    r.add_argument("--lambda", dest="lam", type=float, default=0.6)
    r.add_argument("--K", type=int, default=5)
    r.add_argument("--patriarch", choices=["bl", "lsr", "cp", "tsd"], default="tsd")
    r.add_argument("--generations", type=int, default=5)
    r.add_argument("--epochs", type=int, default=200)
    r.add_argument("--batch-size", type=int, default=128)
    r.add_argument("--lr", type=float, default=DEFAULT_LR)
    r.add_argument("--momentum", type=float, default=0.9)
    r.add_argument("--weight-decay", type=float, default=1e-4)
    r.add_argument("--hidden", default="32", help="comma-separated hidden widths")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--eps", type=float, default=0.1, help="LSR smoothing mass")
    r.add_argument("--beta", type=float, default=0.1, help="CP entropy weight")
    r.add_argument("--teacher-checkpoint", choices=["best", "last"], default="last")
    r.add_argument("--include-patriarch", action="store_true", help="include generation 0 in ensembles")
    r.add_argument("--cache-teacher", action="store_true", help="precompute teacher outputs once")
    r.add_argument("--resume", action="store_true")
    common(r)
    r.set_defaults(func=cmd_run_process)

    m = sub.add_parser("metrics", help="secondary-information diagnostics for checkpoints")
    m.add_argument("--checkpoint", nargs="+", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--report", choices=["topk", "confusion", "distance", "all"], default="all")
    m.add_argument("--k", type=int, default=4)
    m.add_argument("--split", choices=["train", "test", "both"], default="test")
    m.add_argument("--out", required=True)
    common(m)
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("ensemble", help="accuracy of last-epoch ensembles over a generation range")
    e.add_argument("--process", required=True, help="directory written by run-process")
    e.add_argument("--data", required=True)
    e.add_argument("--from-gen", type=int, default=1)
    e.add_argument("--to-gen", type=int, required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--out")
    common(e)
    e.set_defaults(func=cmd_ensemble)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if args.json else "default")
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tolerant-kd: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"tolerant-kd: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
