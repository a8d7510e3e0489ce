"""Evaluation metrics: accuracy, mean LSD, the clean-vs-perturbed disagreement
rate (a discrete H-delta-H proxy), the LSD/accuracy rank trace and CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import InsufficientData, UnlabeledData
from .model import Model, forward_features, predict_from_probs, predict_labels
from .numeric import softmax
from .perturbation import NoisePlan, directions_from_draws, draw_noise, lsd_rows, perturb

CSV_FIELDS = ("epoch", "step", "source_loss", "mean_lsd", "target_accuracy", "hdh_proxy")


@dataclass(frozen=True)
class RunRecord:
    epoch: int
    step: int
    source_loss: float
    mean_lsd: float
    target_accuracy: float | None
    hdh_proxy: float

    def __post_init__(self):
        vals = [self.source_loss, self.mean_lsd, self.hdh_proxy]
        if self.target_accuracy is not None:
            vals.append(self.target_accuracy)
            if not 0.0 <= self.target_accuracy <= 1.0:
                raise ValueError("target_accuracy outside [0, 1]")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite metric in {self}")
        if not 0.0 <= self.hdh_proxy <= 1.0:
            raise ValueError("hdh_proxy outside [0, 1]")


def accuracy(model: Model, ds: Dataset) -> float:
    if not ds.labeled:
        raise UnlabeledData(f"{ds.name} has no labels")
    return float(np.mean(predict_labels(model, ds.features) == ds.labels))


@dataclass(frozen=True)
class PerturbedEval:
    mean_lsd: float
    hdh_proxy: float
    fallbacks: int


def perturbed_eval(model: Model, ds: Dataset, plan: NoisePlan, rng) -> PerturbedEval:
    """Mean LSD and prediction-flip rate under one shared draw of perturbations."""
    g = forward_features(model, ds.features)
    draws = draw_noise(g.shape[0], g.shape[1], plan, rng)
    r, fallbacks = directions_from_draws(model, g, plan, draws)
    per_row = lsd_rows(model, g, r)
    clean = predict_from_probs(softmax(model.classifier(g)))
    pert = predict_from_probs(softmax(model.classifier(perturb(g, r))))
    # fsum is exactly rounded, so the mean does not depend on summation order
    mean = math.fsum(per_row.tolist()) / len(per_row)
    flips = int(np.count_nonzero(clean != pert))
    return PerturbedEval(mean, flips / len(per_row), fallbacks)


def mean_lsd(model: Model, ds: Dataset, plan: NoisePlan, rng) -> float:
    return perturbed_eval(model, ds, plan, rng).mean_lsd


def hdh_proxy(model: Model, ds: Dataset, plan: NoisePlan, rng) -> float:
    return perturbed_eval(model, ds, plan, rng).hdh_proxy


@dataclass(frozen=True)
class TraceResult:
    rho: float
    defined: bool


def lsd_accuracy_trace(history) -> TraceResult:
    """Spearman rank correlation between per-record mean LSD and target accuracy.

    A constant series leaves the correlation undefined; that case returns
    ``rho=0.0`` with ``defined=False``.
    """
    rows = [h for h in history if h.target_accuracy is not None]
    if len(rows) < 3:
        raise InsufficientData("need at least 3 records with target accuracy")
    lsd = np.array([h.mean_lsd for h in rows])
    acc = np.array([h.target_accuracy for h in rows])
    if np.all(lsd == lsd[0]) or np.all(acc == acc[0]):
        return TraceResult(0.0, False)
    rho = stats.spearmanr(lsd, acc).statistic
    return TraceResult(float(rho), True)


def _fmt(v):
    return "NA" if v is None else f"{v:.6g}"


def emit_csv(history, sink) -> int:
    """Write records as CSV to a path or text stream; returns bytes written."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for h in history:
        w.writerow([h.epoch, h.step, _fmt(h.source_loss), _fmt(h.mean_lsd),
                    _fmt(h.target_accuracy), _fmt(h.hdh_proxy)])
    text = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return len(text.encode("utf-8"))


def read_csv(source) -> list[RunRecord]:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        acc = row["target_accuracy"]
        out.append(RunRecord(
            int(row["epoch"]), int(row["step"]), float(row["source_loss"]), float(row["mean_lsd"]),
            None if acc == "NA" else float(acc), float(row["hdh_proxy"]),
        ))
    return out
