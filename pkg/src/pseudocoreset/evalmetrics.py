"""Bayesian-model-average predictions and calibration metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .models import ModelSpec, UnsupportedModelError, _logits

NLL_FLOOR = 1e-12


def predictive(spec: ModelSpec, samples: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Class probabilities averaged over the parameter samples, shape (N, C)."""
    if not spec.is_classifier:
        raise UnsupportedModelError(f"{spec.family} has no class probabilities")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("empty chain")
    feats = dc.const(features)
    total = np.zeros((features.shape[0], spec.num_classes))
    for theta in samples:
        logits, _, _ = _logits(spec, feats, dc.const(theta))
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        p = np.exp(z)
        total += p / p.sum(axis=1, keepdims=True)
    return total / samples.shape[0]


@dataclass
class MetricsReport:
    accuracy: float
    nll: float
    ece: float
    brier: float
    bins: int
    count: int
    samples: int = 0
    nll_clamped: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    CSV_FIELDS = ("method", "ipc", "sampler", "seed", "acc", "nll", "ece", "brier")

    def csv_row(self, method="", ipc="", sampler="", seed="") -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [method, ipc, sampler, seed, repr(self.accuracy), repr(self.nll), repr(self.ece), repr(self.brier)]
        )
        return buf.getvalue()


def metrics(probs: np.ndarray, labels, bins: int = 15, samples: int = 0) -> MetricsReport:
    """Accuracy, NLL, ECE over equal-width confidence bins, and Brier score.

    Argmax ties go to the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("probs must be (N, C) with one label per row")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    n, c = probs.shape
    pred = np.argmax(probs, axis=1)
    correct = (pred == labels).astype(np.float64)
    p_true = probs[np.arange(n), labels]
    clamped = bool(np.any(p_true <= 0))
    nll = float(-np.mean(np.log(p_true + NLL_FLOOR))) if clamped else float(-np.mean(np.log(p_true)))
    conf = probs[np.arange(n), pred]
    # Bin b covers (b/bins, (b+1)/bins]; confidence 0 falls into the first bin.
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    ece = 0.0
    for b in range(bins):
        mask = idx == b
        if mask.any():
            ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    brier = float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))
    return MetricsReport(
        accuracy=float(correct.mean()),
        nll=max(nll, 0.0) if math.isfinite(nll) else nll,
        ece=float(ece),
        brier=brier,
        bins=bins,
        count=n,
        samples=samples,
        nll_clamped=clamped,
    )
