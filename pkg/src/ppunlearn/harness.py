"""Experiment orchestration: config validation and hashing, staged runs with
resumable run directories, lambda sweeps, timing benches, and plot-data
emission.

A run directory contains: config.json, the dataset (npz + manifest), the
original model checkpoint, method artifacts (unlearned checkpoint,
trajectory, refined-matrix dump), summary.json, and stages.json marking
which stages completed.  Re-running with the same config resumes from the
last completed stage and reproduces the same summary.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BaselineSpec, run_baseline
from .data import (Dataset, ForgetSpec, gen_blobs, load_csv, load_dataset,
                   make_forget_split, save_dataset)
from .errors import UsageError
from .evaluate import MiaConfig, evaluate_model, mia_attack, time_stage
from .model import (ModelLayout, TrainConfig, init_model, load_model,
                    save_model, train_ce)
from .pipeline import (UnlearnTask, adaptive_post, ppu_bias, ppu_privacy)
from .probmatrix import PseudoScheme
from .refine import RefineConfig, save_refine_result

SCHEMA_VERSION = 1
METHODS = ("ppu-bias", "ppu-privacy", "adaptive",
           "baseline:retrain", "baseline:original", "baseline:finetune",
           "baseline:neggrad-plus")
STAGES = ("data", "original", "method", "eval")


@dataclass
class ExperimentConfig:
    """Everything one run needs; JSON-serializable and hashable."""

    dataset: dict                   # {"kind": "blobs", ...} | {"kind": "csv", "path": ...}
    forget: dict                    # ForgetSpec fields
    method: str
    out_dir: str
    scheme: dict = field(default_factory=lambda: {"kind": "uniform"})
    lam: float = 1.0
    model: dict = field(default_factory=lambda: {
        "hidden": 32, "epochs": 40, "lr": 0.05, "batch_size": 32,
        "momentum": 0.9})
    finetune: dict = field(default_factory=lambda: {
        "epochs": 20, "lr": 0.05, "batch_size": 32, "momentum": 0.9})
    refine: dict = field(default_factory=dict)   # RefineConfig overrides
    selection: str = "forget-error-proxy"
    adaptive_style: str = "bias"
    evals: dict = field(default_factory=lambda: {
        "errors": True, "mia": False, "timing": False})
    mia: dict = field(default_factory=lambda: {"repetitions": 5})
    timing_repetitions: int = 5
    sweep: dict | None = None       # {"lam": [...]} | {"seed": [...]}
    seeds: dict = field(default_factory=lambda: {
        "data": 0, "model": 1, "protocol": 2})
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> list:
        """All offending fields, not just the first."""
        problems = []
        if self.schema_version != SCHEMA_VERSION:
            problems.append(f"schema_version: expected {SCHEMA_VERSION}")
        if self.method not in METHODS:
            problems.append(f"method: {self.method!r} not one of {METHODS}")
        if self.dataset.get("kind") not in ("blobs", "csv"):
            problems.append("dataset.kind: must be 'blobs' or 'csv'")
        if self.dataset.get("kind") == "csv" and not self.dataset.get("path"):
            problems.append("dataset.path: required for csv datasets")
        if self.forget.get("mode") not in ("class", "selective"):
            problems.append("forget.mode: must be 'class' or 'selective'")
        if self.scheme.get("kind") not in ("uniform", "random-softmax"):
            problems.append("scheme.kind: must be 'uniform' or 'random-softmax'")
        if self.lam <= 0:
            problems.append("lam: must be positive")
        if self.selection not in ("forget-error-proxy", "output-distance"):
            problems.append(f"selection: unknown criterion {self.selection!r}")
        if self.sweep is not None:
            if set(self.sweep) - {"lam", "seed"}:
                problems.append("sweep: only 'lam' and 'seed' axes exist")
            for axis, values in self.sweep.items():
                if not values:
                    problems.append(f"sweep.{axis}: list must be non-empty")
        for name in ("data", "model", "protocol"):
            if name not in self.seeds:
                problems.append(f"seeds.{name}: required")
        if not self.out_dir:
            problems.append("out_dir: required")
        return problems

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "forget": self.forget,
            "method": self.method,
            "scheme": self.scheme,
            "lam": self.lam,
            "model": self.model,
            "finetune": self.finetune,
            "refine": self.refine,
            "selection": self.selection,
            "adaptive_style": self.adaptive_style,
            "evals": self.evals,
            "mia": self.mia,
            "timing_repetitions": self.timing_repetitions,
            "sweep": self.sweep,
            "seeds": self.seeds,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        """Stable under field reordering: canonical JSON, sorted keys.
        The output directory does not change what is computed."""
        payload = self.to_dict()
        payload.pop("out_dir")
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunSummary:
    config_hash: str
    method: str
    eval_report: dict | None
    mia_report: dict | None
    timings: list
    refine_diagnostics: dict | None
    selected_epoch: int | None
    flags: dict
    provenance: str

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "method": self.method,
            "eval_report": self.eval_report,
            "mia_report": self.mia_report,
            "timings": self.timings,
            "refine_diagnostics": self.refine_diagnostics,
            "selected_epoch": self.selected_epoch,
            "flags": self.flags,
            "provenance": self.provenance,
        }


def _provenance() -> str:
    return f"ppunlearn/{__version__} python/{platform.python_version()} " \
           f"numpy/{np.__version__}"


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _stages_path(run_dir: Path) -> Path:
    return run_dir / "stages.json"


def _completed_stages(run_dir: Path) -> list:
    path = _stages_path(run_dir)
    if not path.exists():
        return []
    return _read_json(path).get("completed", [])


def _mark_stage(run_dir: Path, stage: str) -> None:
    done = _completed_stages(run_dir)
    if stage not in done:
        done.append(stage)
    _write_json(_stages_path(run_dir), {"completed": done})


def _build_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.dataset
    if spec["kind"] == "blobs":
        return gen_blobs(
            n_classes=spec.get("n_classes", 5),
            dim=spec.get("dim", 8),
            n_per_class=spec.get("n_per_class", 125),
            spread=spec.get("spread", 0.6),
            seed=cfg.seeds["data"],
        )
    return load_csv(spec["path"])


def _forget_spec(cfg: ExperimentConfig) -> ForgetSpec:
    f = cfg.forget
    return ForgetSpec(
        mode=f["mode"],
        target_class=f.get("target_class", 0),
        count=f.get("count"),
        seed=f.get("seed", cfg.seeds["protocol"]),
    )


def _train_config(section: dict, seed: int, loss: str) -> TrainConfig:
    return TrainConfig(
        lr=section.get("lr", 0.05),
        epochs=section.get("epochs", 20),
        batch_size=section.get("batch_size", 32),
        momentum=section.get("momentum", 0.9),
        seed=seed,
        loss=loss,
    )


def _scheme(cfg: ExperimentConfig) -> PseudoScheme:
    kind = cfg.scheme.get("kind", "uniform")
    if kind == "uniform":
        return PseudoScheme("uniform")
    return PseudoScheme(kind, seed=cfg.scheme.get("seed",
                                                  cfg.seeds["protocol"]))


def _refine_config(cfg: ExperimentConfig, n_train: int) -> RefineConfig:
    r = cfg.refine
    eta = r.get("eta")
    if isinstance(eta, str) and eta.endswith("/n"):
        eta = float(eta[:-2]) / n_train
    return RefineConfig(
        tol=r.get("tol", 1e-6),
        max_iters=r.get("max_iters", 10_000),
        eta=eta,
    )


def run_experiment(cfg: ExperimentConfig, resume: bool = True) -> RunSummary:
    """Execute (or resume) one experiment and persist it under cfg.out_dir."""
    problems = cfg.validate()
    if problems:
        raise UsageError("invalid config: " + "; ".join(problems))
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()

    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        existing = ExperimentConfig.from_dict(_read_json(cfg_path))
        if existing.config_hash() != chash:
            raise UsageError(
                f"run directory {run_dir} belongs to config "
                f"{existing.config_hash()}, not {chash}"
            )
    else:
        _write_json(cfg_path, cfg.to_dict())
    done = _completed_stages(run_dir) if resume else []

    # data
    ds_path = run_dir / "dataset"
    if "data" in done:
        ds = load_dataset(ds_path)
    else:
        ds = _build_dataset(cfg)
        save_dataset(ds, ds_path)
        _mark_stage(run_dir, "data")
    split = make_forget_split(ds, _forget_spec(cfg))

    # original model
    layout = ModelLayout(ds.dim, cfg.model.get("hidden", 32), ds.n_classes)
    orig_path = run_dir / "original.ckpt"
    if "original" in done and orig_path.exists():
        original, _ = load_model(orig_path)
    else:
        original = train_ce(
            init_model(layout, seed=cfg.seeds["model"]),
            *ds.split_arrays("train"),
            _train_config(cfg.model, cfg.seeds["model"], "cross-entropy"),
        )
        save_model(original, orig_path, epoch=cfg.model.get("epochs"))
        _mark_stage(run_dir, "original")

    # method
    unlearned_path = run_dir / "unlearned.ckpt"
    method_path = run_dir / "method.json"
    if "method" in done and unlearned_path.exists():
        params, _ = load_model(unlearned_path)
        method_record = _read_json(method_path)
    else:
        report = _run_method(cfg, ds, split, original, layout, run_dir)
        params = report.params
        method_record = {
            "method": report.method,
            "selected_epoch": report.selected_epoch,
            "trajectory": report.trajectory,
            "refine_summary": report.refine_summary,
            "flags": report.flags,
            "timings": report.timings,
        }
        save_model(params, unlearned_path, epoch=report.selected_epoch)
        if report.checkpoints is not None:
            ckpt_dir = run_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            for entry in report.checkpoints.entries:
                save_model(entry.params,
                           ckpt_dir / f"epoch_{entry.epoch:03d}.ckpt",
                           epoch=entry.epoch,
                           error_rates={k: v for k, v in entry.metrics.items()
                                        if k != "kl_loss"})
        _write_json(method_path, method_record)
        _mark_stage(run_dir, "method")

    # evaluation
    summary = _evaluate_run(cfg, ds, split, original, params, method_record,
                            layout, chash)
    _write_json(run_dir / "summary.json", summary.to_dict())
    _mark_stage(run_dir, "eval")
    return summary


def _run_method(cfg, ds, split, original, layout, run_dir):
    method = cfg.method
    if method.startswith("baseline:"):
        kind = method.split(":", 1)[1]
        spec = BaselineSpec(
            kind=kind,
            train=_train_config(cfg.finetune if kind != "retrain" else cfg.model,
                                cfg.seeds["model"], "cross-entropy"),
        )
        return run_baseline(spec, ds, split, original=original, layout=layout)

    n_train = len(ds.splits["train"])
    task = UnlearnTask(
        dataset=ds,
        split=split,
        mode={"ppu-bias": "bias", "ppu-privacy": "privacy",
              "adaptive": "adaptive"}[method],
        scheme=_scheme(cfg),
        finetune=_train_config(cfg.finetune, cfg.seeds["protocol"], "kl"),
        lam=cfg.lam,
        refine_cfg=_refine_config(cfg, n_train),
        selection=cfg.selection,
        adaptive_style=cfg.adaptive_style,
    )
    if method == "ppu-bias":
        report = ppu_bias(original, task)
    elif method == "ppu-privacy":
        report = ppu_privacy(original, task)
    else:
        # Adaptive runs after the finetune baseline by default.
        pre_spec = BaselineSpec(
            kind="finetune",
            train=_train_config(cfg.finetune, cfg.seeds["model"],
                                "cross-entropy"),
        )
        predecessor = run_baseline(pre_spec, ds, split, original=original,
                                   layout=layout)
        report = adaptive_post(predecessor.params, task)
    if report.refine_result is not None:
        save_refine_result(report.refine_result, run_dir / "refined")
    return report


def _evaluate_run(cfg, ds, split, original, params, method_record, layout,
                  chash) -> RunSummary:
    eval_report = None
    mia_report = None
    timings = []
    if cfg.evals.get("errors", True):
        eval_report = evaluate_model(params, ds, split).to_dict()
    if cfg.evals.get("mia", False):
        mia = mia_attack(
            params,
            ds.arrays_at(split.forget_idx),
            ds.split_arrays("test"),
            MiaConfig(repetitions=cfg.mia.get("repetitions", 5),
                      seed=cfg.seeds["protocol"]),
        )
        mia_report = mia.to_dict()
    if cfg.evals.get("timing", False):
        timings = [t.to_dict() for t in bench_methods(cfg, ds, split,
                                                      original, layout)]
    return RunSummary(
        config_hash=chash,
        method=cfg.method,
        eval_report=eval_report,
        mia_report=mia_report,
        timings=timings,
        refine_diagnostics=method_record.get("refine_summary"),
        selected_epoch=method_record.get("selected_epoch"),
        flags=method_record.get("flags", {}),
        provenance=_provenance(),
    )


def bench_methods(cfg: ExperimentConfig, ds, split, original, layout,
                  methods=("method", "retrain", "finetune")):
    """Warm-up once, then time the configured method against the baselines.

    Retrain gets the original training budget (cfg.model); the unlearning
    method and the finetune baseline run with the fine-tune budget.
    """
    records = []
    reps = cfg.timing_repetitions

    def run_method():
        _run_method(cfg, ds, split, original, layout, Path(cfg.out_dir))

    def run_retrain():
        spec = BaselineSpec(kind="retrain",
                            train=_train_config(cfg.model, cfg.seeds["model"],
                                                "cross-entropy"))
        run_baseline(spec, ds, split, original=original, layout=layout)

    def run_finetune():
        spec = BaselineSpec(kind="finetune",
                            train=_train_config(cfg.finetune,
                                                cfg.seeds["model"],
                                                "cross-entropy"))
        run_baseline(spec, ds, split, original=original, layout=layout)

    thunks = {"method": (cfg.method, run_method),
              "retrain": ("baseline:retrain", run_retrain),
              "finetune": ("baseline:finetune", run_finetune)}
    for name in methods:
        label, thunk = thunks[name]
        thunk()  # warm-up excluded from the timings
        records.append(time_stage(label, thunk, repetitions=reps))
    return records


def sweep_lambda(cfg: ExperimentConfig, lambdas) -> list:
    """Run the method once per lambda with shared seeds; returns the table
    [(lam, retain_error, forget_error), ...] and persists it as CSV."""
    if cfg.method not in ("ppu-bias", "ppu-privacy"):
        raise UsageError("lambda sweeps need a ppu-bias or ppu-privacy method")
    if not lambdas:
        raise UsageError("lambda list must be non-empty")
    rows = []
    parent = Path(cfg.out_dir)
    parent.mkdir(parents=True, exist_ok=True)
    for lam in lambdas:
        child = ExperimentConfig.from_dict(cfg.to_dict())
        child.lam = float(lam)
        child.sweep = None
        child.out_dir = str(parent / f"lam_{lam:g}")
        summary = run_experiment(child)
        rows.append((float(lam),
                     summary.eval_report["retain_error"],
                     summary.eval_report["forget_error"]))
    with open(parent / "sweep_lambda.csv", "w", encoding="utf-8") as fh:
        fh.write("lam,retain_error,forget_error\n")
        for lam, r, f in rows:
            fh.write(f"{lam:.10g},{r:.10g},{f:.10g}\n")
    return rows


def sweep_seeds(cfg: ExperimentConfig, seeds) -> list:
    """Run the method once per master seed (data/model/protocol derived);
    returns [(seed, retain_error, forget_error), ...] plus a CSV."""
    if not seeds:
        raise UsageError("seed list must be non-empty")
    rows = []
    parent = Path(cfg.out_dir)
    parent.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        child = ExperimentConfig.from_dict(cfg.to_dict())
        child.seeds = {"data": int(seed), "model": int(seed) + 1,
                       "protocol": int(seed) + 2}
        child.sweep = None
        child.out_dir = str(parent / f"seed_{seed}")
        summary = run_experiment(child)
        rows.append((int(seed),
                     summary.eval_report["retain_error"],
                     summary.eval_report["forget_error"]))
    with open(parent / "sweep_seeds.csv", "w", encoding="utf-8") as fh:
        fh.write("seed,retain_error,forget_error\n")
        for seed, r, f in rows:
            fh.write(f"{seed},{r:.10g},{f:.10g}\n")
    return rows


def run_sweep(cfg: ExperimentConfig) -> list:
    """Dispatch on the config's sweep axis."""
    if not cfg.sweep:
        raise UsageError("config has no sweep axis")
    if "lam" in cfg.sweep:
        return sweep_lambda(cfg, cfg.sweep["lam"])
    return sweep_seeds(cfg, cfg.sweep["seed"])


def emit_plot_data(run_dir) -> list:
    """Write CSV series for the per-epoch error curves and timing records.

    Byte-identical on re-emission for an unchanged run directory.  Raises
    UsageError naming the missing stage when the run is incomplete.
    """
    run_dir = Path(run_dir)
    done = _completed_stages(run_dir)
    for stage in ("method", "eval"):
        if stage not in done:
            raise UsageError(
                f"run at {run_dir} is incomplete: stage {stage!r} missing"
            )
    method_record = _read_json(run_dir / "method.json")
    summary = _read_json(run_dir / "summary.json")
    written = []

    trajectory = method_record.get("trajectory", [])
    for metric in ("forget", "retain"):
        path = run_dir / f"plot_{metric}_error.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"epoch,{metric}_error\n")
            for entry in trajectory:
                fh.write(f"{entry['epoch']},{entry[metric]:.10g}\n")
        written.append(path)

    timings = summary.get("timings") or []
    if timings:
        path = run_dir / "plot_timing.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("method,mean_seconds,std_error\n")
            for rec in timings:
                fh.write(f"{rec['label']},{rec['mean']:.10g},"
                         f"{rec['std_error']:.10g}\n")
        written.append(path)
    return written


def load_summary(run_dir) -> RunSummary:
    """Rebuild a RunSummary from a persisted run directory."""
    run_dir = Path(run_dir)
    if "eval" not in _completed_stages(run_dir):
        raise UsageError(f"run at {run_dir} has no completed eval stage")
    d = _read_json(run_dir / "summary.json")
    return RunSummary(**d)
