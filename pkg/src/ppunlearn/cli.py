"""Command-line entry point.

Subcommands: generate-data, train, unlearn, eval, mia, bench, sweep, report.
`PPUNLEARN_OUT_ROOT` prefixes relative output directories;
`PPUNLEARN_THREADS` caps BLAS threads (read before numpy loads).

Exit codes: 0 success, 2 validation error, 3 runtime error,
4 refinement did not converge.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_NONCONVERGENCE = 4

_threads = os.environ.get("PPUNLEARN_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)


def _out_path(path: str) -> str:
    root = os.environ.get("PPUNLEARN_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_config(path: str):
    from .harness import ExperimentConfig
    with open(path, encoding="utf-8") as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    cfg.out_dir = _out_path(cfg.out_dir)
    return cfg


def _cmd_generate_data(args) -> int:
    from .data import gen_blobs, save_dataset
    ds = gen_blobs(args.classes, args.dim, args.per_class, args.spread,
                   args.seed)
    save_dataset(ds, _out_path(args.out))
    print(f"dataset: N={ds.n} D={ds.dim} K={ds.n_classes} -> {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .model import ModelLayout, TrainConfig, init_model, save_model, train_ce
    ds = load_dataset(_out_path(args.dataset))
    layout = ModelLayout(ds.dim, args.hidden, ds.n_classes)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, momentum=args.momentum,
                      seed=args.seed)
    params = train_ce(init_model(layout, seed=args.seed),
                      *ds.split_arrays("train"), cfg)
    save_model(params, _out_path(args.out), epoch=args.epochs)
    print(f"model -> {args.out}")
    return EXIT_OK


def _cmd_unlearn(args) -> int:
    from .harness import run_experiment
    cfg = _load_config(args.config)
    if args.method:
        cfg.method = args.method
    if args.lam is not None:
        cfg.lam = args.lam
    if args.scheme:
        cfg.scheme = {"kind": args.scheme}
    if args.epochs is not None:
        cfg.finetune = dict(cfg.finetune, epochs=args.epochs)
    if args.selection:
        cfg.selection = args.selection
    if args.seed is not None:
        cfg.seeds = {"data": args.seed, "model": args.seed + 1,
                     "protocol": args.seed + 2}
    if args.out_dir:
        cfg.out_dir = _out_path(args.out_dir)
    summary = run_experiment(cfg)
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    diag = summary.refine_diagnostics
    if diag is not None and not diag.get("converged", True):
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import load_summary
    summary = load_summary(_out_path(args.run_dir))
    print(json.dumps(summary.eval_report, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_mia(args) -> int:
    from .data import load_dataset, make_forget_split, ForgetSpec
    from .evaluate import MiaConfig, mia_attack
    from .harness import ExperimentConfig, _read_json
    from .model import load_model
    run_dir = _out_path(args.run_dir)
    cfg = ExperimentConfig.from_dict(_read_json(os.path.join(run_dir,
                                                             "config.json")))
    ds = load_dataset(os.path.join(run_dir, "dataset"))
    spec = ForgetSpec(mode=cfg.forget["mode"],
                      target_class=cfg.forget.get("target_class", 0),
                      count=cfg.forget.get("count"),
                      seed=cfg.forget.get("seed", cfg.seeds["protocol"]))
    split = make_forget_split(ds, spec)
    params, _ = load_model(os.path.join(run_dir, "unlearned.ckpt"))
    report = mia_attack(params, ds.arrays_at(split.forget_idx),
                        ds.split_arrays("test"),
                        MiaConfig(repetitions=args.repetitions,
                                  seed=cfg.seeds["protocol"]))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .data import make_forget_split
    from .harness import bench_methods, _build_dataset, _forget_spec
    from .model import ModelLayout, init_model, train_ce, TrainConfig
    cfg = _load_config(args.config)
    problems = cfg.validate()
    if problems:
        raise _Validation("; ".join(problems))
    ds = _build_dataset(cfg)
    split = make_forget_split(ds, _forget_spec(cfg))
    layout = ModelLayout(ds.dim, cfg.model.get("hidden", 32), ds.n_classes)
    original = train_ce(
        init_model(layout, seed=cfg.seeds["model"]),
        *ds.split_arrays("train"),
        TrainConfig(lr=cfg.model.get("lr", 0.05),
                    epochs=cfg.model.get("epochs", 40),
                    batch_size=cfg.model.get("batch_size", 32),
                    momentum=cfg.model.get("momentum", 0.9),
                    seed=cfg.seeds["model"]),
    )
    records = bench_methods(cfg, ds, split, original, layout)
    for rec in records:
        print(f"{rec.label}: {rec.mean:.4f}s +- {rec.std_error:.4f}s "
              f"over {len(rec.samples)} runs")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .harness import sweep_lambda, sweep_seeds
    cfg = _load_config(args.config)
    if args.lam:
        rows = sweep_lambda(cfg, [float(x) for x in args.lam.split(",")])
        axis = "lam"
    elif args.seeds:
        rows = sweep_seeds(cfg, [int(x) for x in args.seeds.split(",")])
        axis = "seed"
    else:
        raise _Validation("sweep needs --lam or --seeds")
    print(f"{axis},retain_error,forget_error")
    for value, r, f in rows:
        print(f"{value:g},{r:.2f},{f:.2f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .harness import emit_plot_data, load_summary
    run_dir = _out_path(args.run_dir)
    summary = load_summary(run_dir)
    paths = emit_plot_data(run_dir)
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


class _Validation(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppunlearn",
                                description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="synthesize a blob dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--per-class", type=int, default=125)
    g.add_argument("--spread", type=float, default=0.6)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_generate_data)

    t = sub.add_parser("train", help="train the original classifier")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=1)
    t.set_defaults(fn=_cmd_train)

    u = sub.add_parser("unlearn", help="run an experiment from a JSON config")
    u.add_argument("--config", required=True)
    u.add_argument("--method", choices=["ppu-bias", "ppu-privacy", "adaptive",
                                        "baseline:retrain",
                                        "baseline:original",
                                        "baseline:finetune",
                                        "baseline:neggrad-plus"])
    u.add_argument("--lam", type=float)
    u.add_argument("--scheme", choices=["uniform", "random-softmax"])
    u.add_argument("--epochs", type=int, help="fine-tune epoch override")
    u.add_argument("--selection", choices=["forget-error-proxy",
                                           "output-distance"])
    u.add_argument("--seed", type=int, help="master seed override")
    u.add_argument("--out-dir")
    u.set_defaults(fn=_cmd_unlearn)

    e = sub.add_parser("eval", help="print the eval report of a run")
    e.add_argument("--run-dir", required=True)
    e.set_defaults(fn=_cmd_eval)

    m = sub.add_parser("mia", help="membership inference against a run")
    m.add_argument("--run-dir", required=True)
    m.add_argument("--repetitions", type=int, default=5)
    m.set_defaults(fn=_cmd_mia)

    b = sub.add_parser("bench", help="time the method against retraining")
    b.add_argument("--config", required=True)
    b.set_defaults(fn=_cmd_bench)

    s = sub.add_parser("sweep", help="lambda or seed sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--lam", help="comma-separated lambda values")
    s.add_argument("--seeds", help="comma-separated master seeds")
    s.set_defaults(fn=_cmd_sweep)

    r = sub.add_parser("report", help="emit plot CSVs and print the summary")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .errors import UnlearnError, UsageError
    try:
        return args.fn(args)
    except (_Validation, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except UnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
