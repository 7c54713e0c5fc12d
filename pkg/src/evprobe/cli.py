"""Command-line entry point: ``evprobe {compare,sweep,ard,toy,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .evidence import MarglikConfig
from .probes import ProbeArchitecture
from .synthetic import linear_task, random_label_task, sparse_task
from .training import TrainConfig


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, shuffle_seed=args.seed, init_seed=args.seed)


def _config_task(args):
    """(X_train, y_train, X_test, y_test) for the task/representation named in a config."""
    cfg = ex.load_config(args.config)
    task = next((t for t in cfg.tasks if args.task in (None, t.name)), None)
    rep = next((r for r in cfg.representations if args.representation in (None, r.name)), None)
    if task is None or rep is None:
        raise SystemExit("task or representation not found in config")
    d = ex.load_task_matrix(task, rep)
    return d.X_train, d.y_train, d.X_test, d.y_test


def cmd_compare(args) -> int:
    cfg = ex.load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    table = ex.run_comparison(cfg, checkpoints=not args.no_checkpoints)
    print(ex.table_csv(table), end="")
    return 0 if table["failed_jobs"] == 0 else 1


def cmd_report(args) -> int:
    table = ex.report(args.output_dir)
    print(ex.table_csv(table), end="")
    return 0 if table["failed_jobs"] == 0 else 1


def cmd_sweep(args) -> int:
    if args.config:
        Xtr, ytr, Xte, yte = _config_task(args)
    else:
        X, y, _ = linear_task(args.n_train + args.n_test, args.dim, args.classes, args.seed,
                              args.weight_scale)
        Xtr, ytr, Xte, yte = (X[:args.n_train], y[:args.n_train],
                              X[args.n_train:], y[args.n_train:])
    grid = args.grid or ex.default_decay_grid()
    arch = ProbeArchitecture(Xtr.shape[1], int(max(ytr.max(), yte.max(initial=0))) + 1,
                             args.depth)
    records = ex.run_decay_sweep(Xtr, ytr, Xte, yte, arch, grid, _train_cfg(args),
                                 args.curvature)
    text = ex.write_records_csv(records, ex.SWEEP_FIELDS, args.out)
    if not args.out:
        print(text, end="")
    best = ex.evidence_choice(records)
    logging.info("evidence selects lambda=%g (test_ce %.4f)", best["lambda"], best["test_ce"])
    return 0


def cmd_ard(args) -> int:
    relevant = None
    if args.config:
        X, y, _, _ = _config_task(args)
    elif args.task == "random":
        X, y = random_label_task(args.n, args.dim, args.classes, args.seed)
    else:
        X, y, relevant = sparse_task(args.n, args.dim, args.classes, args.seed,
                                     args.relevant, args.weight_scale)
    mcfg = MarglikConfig(prior_mode="per_parameter", curvature="diagonal")
    res = ex.run_ard(X, y, _train_cfg(args), mcfg, bins=args.bins, relevant_dims=relevant)
    text = ex.write_records_csv(res.histogram, ex.HIST_FIELDS, args.out)
    if not args.out:
        print(text, end="")
    if args.summary:
        Path(args.summary).write_text(ex.dumps_json(res.summary), encoding="utf-8")
    for k, v in sorted(res.summary.items()):
        logging.info("%s: %s", k, v)
    return 0


def cmd_toy(args) -> int:
    res = ex.run_toy(args.output_dir, seed=args.seed, n=args.n, grid_size=args.grid_size,
                     cfg=TrainConfig(epochs=args.epochs, shuffle_seed=args.seed,
                                     init_seed=args.seed))
    for key, fit in res.fits.items():
        print(f"{key}\t{fit.log_evidence:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evprobe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compare", help="representation comparison table from a YAML config")
    c.add_argument("config")
    c.add_argument("--output-dir", help="override output_dir from the config")
    c.add_argument("--no-checkpoints", action="store_true")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="rebuild comparison outputs from saved fits")
    r.add_argument("output_dir")
    r.set_defaults(func=cmd_report)

    def data_args(q, synthetic_task=False):
        q.add_argument("--config", help="take data from this experiment config")
        q.add_argument("--task", help="task name in the config" + (
            "; without --config: 'sparse' (default) or 'random'" if synthetic_task else ""))
        q.add_argument("--representation", help="representation name in the config")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--epochs", type=int, default=TrainConfig.epochs)
        q.add_argument("--dim", type=int, default=768)
        q.add_argument("--classes", type=int, default=3)
        q.add_argument("--out", help="CSV path (default: stdout)")

    s = sub.add_parser("sweep", help="fixed-precision sweep CSV")
    data_args(s)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--weight-scale", type=float, default=0.2)
    s.add_argument("--depth", type=int, default=0, choices=(0, 1, 2))
    s.add_argument("--curvature", default="kron", choices=("kron", "diagonal"))
    s.add_argument("--grid", type=float, nargs="+", help="precision values")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ard", help="per-parameter precision histogram CSV")
    data_args(a, synthetic_task=True)
    a.add_argument("--n", type=int, default=500)
    a.add_argument("--relevant", type=int, default=10)
    a.add_argument("--weight-scale", type=float, default=2.0)
    a.add_argument("--bins", type=int, default=40)
    a.add_argument("--summary", help="write the summary JSON here")
    a.set_defaults(func=cmd_ard)

    t = sub.add_parser("toy", help="two-cluster toy: log evidences and predictive grid")
    t.add_argument("--output-dir", default="toy")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n", type=int, default=400)
    t.add_argument("--grid-size", type=int, default=50)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"evprobe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
