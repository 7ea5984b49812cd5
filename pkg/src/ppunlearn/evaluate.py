"""Error-rate evaluation, the loss-based membership-inference attack, and
wall-clock timing of pipeline stages.

The attacker is a 1-D logistic regression on per-example cross-entropy
losses, fit by deterministic full-batch gradient descent: forget-set losses
are labeled "in", test-set losses "out", the sets are balanced by seeded
subsampling, and accuracy is measured on a held-out stratified 20% over
several split seeds.  50% accuracy means the attacker cannot tell the
forget set from unseen data.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, UsageError
from .model import ModelParams, forward_probs, predict_labels
from .probmatrix import FLOOR


@dataclass
class EvalReport:
    """Test / retain / forget error percentages plus the subset sizes."""

    test_error: float
    retain_error: float
    forget_error: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "test_error": self.test_error,
            "retain_error": self.retain_error,
            "forget_error": self.forget_error,
            "counts": dict(self.counts),
        }


@dataclass
class MiaConfig:
    repetitions: int = 5
    seed: int = 0
    train_frac: float = 0.8

    def __post_init__(self):
        if self.repetitions < 1:
            raise UsageError("need at least one repetition")
        if not 0.0 < self.train_frac < 1.0:
            raise UsageError("train_frac must be in (0, 1)")


@dataclass
class MiaReport:
    mean_accuracy: float
    std_accuracy: float
    repetitions: int
    accuracies: list
    attacker: str = "logistic-regression on per-example loss"
    split_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "repetitions": self.repetitions,
            "accuracies": list(self.accuracies),
            "attacker": self.attacker,
            "split_seed": self.split_seed,
        }


@dataclass
class TimingRecord:
    label: str
    samples: list
    mean: float
    std_error: float
    host: str = field(default_factory=platform.node)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "samples": list(self.samples),
            "mean": self.mean,
            "std_error": self.std_error,
            "host": self.host,
        }


def error_rate(params: ModelParams, inputs, labels) -> float:
    """Misclassification percentage (100 * error) under argmax prediction."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    if inputs.shape[0] == 0:
        raise UsageError("error_rate needs a non-empty subset")
    return 100.0 * float(np.mean(predict_labels(params, inputs) != labels))


def evaluate_model(params: ModelParams, ds, split) -> EvalReport:
    """Standard three-way report: test split, retain rows, forget rows."""
    xt, yt = ds.split_arrays("test")
    xr, yr = ds.arrays_at(split.retain_idx)
    xf, yf = ds.arrays_at(split.forget_idx)
    return EvalReport(
        test_error=error_rate(params, xt, yt),
        retain_error=error_rate(params, xr, yr),
        forget_error=error_rate(params, xf, yf),
        counts={"test": len(yt), "retain": len(yr), "forget": len(yf)},
    )


def example_losses(params: ModelParams, inputs, labels) -> np.ndarray:
    """Per-example cross-entropy of the true label."""
    probs = forward_probs(params, inputs).values
    labels = np.asarray(labels, dtype=np.int64)
    p_true = np.maximum(probs[np.arange(len(labels)), labels], FLOOR)
    return -np.log(p_true)


def _fit_logistic_1d(z: np.ndarray, y: np.ndarray, lr: float = 1.0,
                     max_iters: int = 5000, tol: float = 1e-12):
    """Full-batch GD on standardized scalar features; fully deterministic."""
    w = 0.0
    b = 0.0
    for _ in range(max_iters):
        u = w * z + b
        p = 1.0 / (1.0 + np.exp(-u))
        gw = float(np.mean((p - y) * z))
        gb = float(np.mean(p - y))
        w -= lr * gw
        b -= lr * gb
        if max(abs(gw), abs(gb)) < tol:
            break
    return w, b


def _stratified_split(n_per_side: int, train_frac: float, seed: int):
    """One permutation reused for both sides, so equal-size classes stay
    paired position-for-position (this makes the identical-distribution case
    come out at exactly 50%)."""
    perm = np.random.default_rng(seed).permutation(n_per_side)
    n_train = int(train_frac * n_per_side)
    return perm[:n_train], perm[n_train:]


def mia_attack(params: ModelParams, forget_set, test_set,
               cfg: MiaConfig | None = None) -> MiaReport:
    """Loss-based membership inference against ``params``.

    Args:
        forget_set, test_set: (inputs, labels) pairs; the attacker tries to
            tell forget examples ("in") from test examples ("out").

    Returns holdout accuracy mean and standard deviation over the configured
    repetitions, each with its own split seed.
    """
    cfg = cfg or MiaConfig()
    xf, yf = forget_set
    xt, yt = test_set
    if len(yf) == 0 or len(yt) == 0:
        raise UsageError("both subsets must be non-empty")
    losses_in = example_losses(params, xf, yf)
    losses_out = example_losses(params, xt, yt)

    # Balance by subsampling the larger side.
    n = min(len(losses_in), len(losses_out))
    if n < 10:
        raise InsufficientDataError(
            f"only {n} examples per side after balancing; need >= 10"
        )
    rng = np.random.default_rng(cfg.seed)
    if len(losses_in) > n:
        losses_in = losses_in[rng.permutation(len(losses_in))[:n]]
    if len(losses_out) > n:
        losses_out = losses_out[rng.permutation(len(losses_out))[:n]]

    accuracies = []
    for rep in range(cfg.repetitions):
        tr, ho = _stratified_split(n, cfg.train_frac, cfg.seed + rep)
        z_tr = np.concatenate([losses_in[tr], losses_out[tr]])
        y_tr = np.concatenate([np.ones(len(tr)), np.zeros(len(tr))])
        mu, sd = z_tr.mean(), z_tr.std()
        if sd == 0.0:
            sd = 1.0
        w, b = _fit_logistic_1d((z_tr - mu) / sd, y_tr)
        z_ho = (np.concatenate([losses_in[ho], losses_out[ho]]) - mu) / sd
        y_ho = np.concatenate([np.ones(len(ho)), np.zeros(len(ho))])
        pred = (w * z_ho + b >= 0.0)
        accuracies.append(100.0 * float(np.mean(pred == (y_ho == 1.0))))

    acc = np.asarray(accuracies)
    std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
    return MiaReport(
        mean_accuracy=float(acc.mean()),
        std_accuracy=std,
        repetitions=cfg.repetitions,
        accuracies=accuracies,
        split_seed=cfg.seed,
    )


def time_stage(label: str, thunk, repetitions: int = 1) -> TimingRecord:
    """Run ``thunk`` under a monotonic clock; mean and standard error."""
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        thunk()
        samples.append(time.perf_counter() - t0)
    arr = np.asarray(samples)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return TimingRecord(label=label, samples=samples, mean=float(arr.mean()),
                        std_error=stderr)
