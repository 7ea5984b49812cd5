"""End-to-end unlearning pipelines.

Both modes share the same skeleton: extract output probabilities for the
train rows, substitute pseudo-probabilities on the forget rows, optionally
refine the whole matrix under class-mass constraints, then fine-tune the
weights toward the targets with the KL loss.  Bias mode keeps the raw
substituted targets and the final epoch; privacy mode refines first and
selects the checkpoint whose forget error best matches a retrain-like
reference.  Adaptive mode runs either variant seeded from a predecessor
model's outputs instead of the original's.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SplitResult
from .errors import UsageError
from .evaluate import error_rate
from .model import (CheckpointSet, ModelParams, TrainConfig, finetune_kl,
                    forward_probs)
from .probmatrix import (ProbMatrix, PseudoScheme, kl_rows, pseudo_generate,
                         replace_rows)
from .refine import RefineConfig, problem_from_outputs, refine

MODES = ("bias", "privacy", "adaptive")
CRITERIA = ("forget-error-proxy", "output-distance")


@dataclass
class UnlearnTask:
    """Configuration of one unlearning request."""

    dataset: Dataset
    split: SplitResult
    mode: str
    scheme: PseudoScheme
    finetune: TrainConfig
    lam: float = 1.0
    refine_cfg: RefineConfig | None = None
    selection: str = "forget-error-proxy"
    adaptive_style: str = "bias"   # which variant adaptive mode runs

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.selection not in CRITERIA:
            raise UsageError(f"unknown selection criterion {self.selection!r}")
        if self.adaptive_style not in ("bias", "privacy"):
            raise UsageError(f"unknown adaptive style {self.adaptive_style!r}")
        if self.lam <= 0:
            raise UsageError(f"lambda must be positive, got {self.lam}")
        if self.finetune.loss != "kl":
            raise UsageError("fine-tuning config must use the KL loss")
        style = self.adaptive_style if self.mode == "adaptive" else self.mode
        if style == "privacy" and self.refine_cfg is None:
            raise UsageError("privacy mode requires a refinement config")


@dataclass
class UnlearnReport:
    """Outcome of a pipeline run: final weights plus the full trail.

    ``checkpoints`` and ``refine_result`` carry the heavyweight artifacts
    (per-epoch snapshots, refined target matrix) so callers can persist them.
    """

    params: ModelParams
    selected_epoch: int | None
    trajectory: list                    # one metrics dict per epoch
    refine_summary: dict | None
    timings: dict
    flags: dict = field(default_factory=dict)
    method: str = ""
    checkpoints: CheckpointSet | None = None
    refine_result: object = None        # RefineResult when refinement ran

    def deterministic_fields(self) -> dict:
        """Everything except wall-clock times, for determinism checks."""
        return {
            "selected_epoch": self.selected_epoch,
            "trajectory": self.trajectory,
            "refine_summary": self.refine_summary,
            "flags": self.flags,
            "method": self.method,
        }


def select_checkpoint(cps: CheckpointSet, criterion: str = "forget-error-proxy",
                      reference: float = 0.0):
    """Pick the checkpoint matching the criterion; ties go to the earliest.

    forget-error-proxy minimizes |forget error - reference|; output-distance
    minimizes the recorded mean KL to the original outputs on the retain set
    (metric key "retain_kl").
    """
    if len(cps) == 0:
        raise UsageError("cannot select from an empty checkpoint set")
    if criterion == "forget-error-proxy":
        scores = [abs(e.metrics["forget"] - reference) for e in cps.entries]
    elif criterion == "output-distance":
        try:
            scores = [e.metrics["retain_kl"] for e in cps.entries]
        except KeyError:
            raise UsageError(
                "output-distance selection needs a 'retain_kl' metric on "
                "every checkpoint"
            )
    else:
        raise UsageError(f"unknown selection criterion {criterion!r}")
    best = int(np.argmin(scores))  # argmin takes the first minimum
    entry = cps.entries[best]
    return entry.epoch, entry.params


def _train_positions(ds: Dataset, split: SplitResult):
    """Positions of forget/retain rows inside the train-split row order."""
    train = ds.splits["train"]
    pos = {int(g): i for i, g in enumerate(train)}
    fpos = np.asarray([pos[int(g)] for g in split.forget_idx], dtype=np.int64)
    rpos = np.asarray([pos[int(g)] for g in split.retain_idx], dtype=np.int64)
    return train, fpos, rpos


def _run_ppu(source: ModelParams, task: UnlearnTask, style: str,
             method: str) -> UnlearnReport:
    ds, split = task.dataset, task.split
    train_idx, fpos, rpos = _train_positions(ds, split)
    X = ds.inputs[train_idx]
    timings, flags = {}, {}

    t0 = time.perf_counter()
    outputs = forward_probs(source, X, row_ids=train_idx)
    pseudo = pseudo_generate(len(fpos), ds.n_classes, task.scheme) \
        if len(fpos) else None
    targets = outputs if pseudo is None else replace_rows(outputs, fpos, pseudo)
    timings["extract"] = time.perf_counter() - t0

    refine_summary = None
    refine_result = None
    if style == "privacy":
        t0 = time.perf_counter()
        problem = problem_from_outputs(outputs, targets, fpos, rpos, task.lam)
        refine_result = refine(problem, task.refine_cfg)
        targets = refine_result.matrix
        timings["refine"] = time.perf_counter() - t0
        refine_summary = {
            "converged": refine_result.converged,
            "iterations": refine_result.iterations,
            "objective": refine_result.objective,
            "final_residual": refine_result.dual.residuals[-1]
            if refine_result.dual.residuals else 0.0,
        }
        if not refine_result.converged:
            # the problem is convex, so this signals a step-size/budget
            # issue; flag for auditing and continue with the best iterate
            flags["refine_not_converged"] = True

    if task.finetune.epochs == 0:
        return UnlearnReport(
            params=source.copy(), selected_epoch=None, trajectory=[],
            refine_summary=refine_summary, timings=timings, flags=flags,
            method=method, refine_result=refine_result,
        )

    eval_sets = {
        "forget": ds.arrays_at(split.forget_idx),
        "retain": ds.arrays_at(split.retain_idx),
        "test": ds.split_arrays("test"),
    }
    weights = np.ones(len(train_idx))
    weights[rpos] = task.lam
    extra = None
    if style == "privacy":
        xr = ds.inputs[split.retain_idx]
        retain_ref = forward_probs(source, xr)

        def extra(p):
            out = forward_probs(p, xr)
            return {"retain_kl": float(kl_rows(out, retain_ref).mean())}

    t0 = time.perf_counter()
    cps = finetune_kl(source, X, targets, task.finetune,
                      eval_sets=eval_sets, row_weights=weights,
                      extra_metrics=extra)
    timings["finetune"] = time.perf_counter() - t0

    trajectory = [dict(e.metrics, epoch=e.epoch) for e in cps.entries]
    t0 = time.perf_counter()
    if style == "privacy":
        reference = _forget_class_test_error(source, ds, split)
        epoch, params = select_checkpoint(cps, task.selection, reference)
        flags["selection_reference"] = reference
    else:
        entry = cps.entries[-1]
        epoch, params = entry.epoch, entry.params
    timings["select"] = time.perf_counter() - t0

    return UnlearnReport(
        params=params, selected_epoch=epoch, trajectory=trajectory,
        refine_summary=refine_summary, timings=timings, flags=flags,
        method=method, checkpoints=cps, refine_result=refine_result,
    )


def _forget_class_test_error(source: ModelParams, ds: Dataset,
                             split: SplitResult) -> float:
    """Held-out test error on the forgotten class(es), evaluated with the
    source model: a proxy for the forget error a retrained model would show.
    """
    classes = np.unique(ds.labels[split.forget_idx])
    test = ds.splits["test"]
    rows = test[np.isin(ds.labels[test], classes)]
    if rows.size == 0:
        raise UsageError("no test examples of the forgotten class(es)")
    return error_rate(source, ds.inputs[rows], ds.labels[rows])


def ppu_bias(model: ModelParams, task: UnlearnTask) -> UnlearnReport:
    """Bias-removal unlearning: direct substitution, no refinement."""
    if task.mode != "bias":
        raise UsageError(f"task mode is {task.mode!r}, expected 'bias'")
    return _run_ppu(model, task, "bias", method="ppu-bias")


def ppu_privacy(model: ModelParams, task: UnlearnTask) -> UnlearnReport:
    """Privacy-preserving unlearning: refinement plus checkpoint selection."""
    if task.mode != "privacy":
        raise UsageError(f"task mode is {task.mode!r}, expected 'privacy'")
    return _run_ppu(model, task, "privacy", method="ppu-privacy")


def adaptive_post(predecessor: ModelParams, task: UnlearnTask) -> UnlearnReport:
    """Post-process any unlearned/fine-tuned model with either PPU variant,
    seeding targets from the predecessor's outputs."""
    if task.mode != "adaptive":
        raise UsageError(f"task mode is {task.mode!r}, expected 'adaptive'")
    return _run_ppu(predecessor, task, task.adaptive_style, method="adaptive")
