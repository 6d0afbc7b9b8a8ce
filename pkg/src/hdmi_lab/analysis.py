"""Accuracy, calibration and hypothesis-agreement diagnostics."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .objectives import EPS


def predictions(p):
    """Argmax per row; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(p), axis=1)


def _check(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} do not agree")
    return p, y


def accuracy(p, y):
    p, y = _check(p, y)
    return float(np.mean(predictions(p) == y))


def per_class_accuracy(p, y, K=None):
    """Recall of each class."""
    p, y = _check(p, y)
    K = p.shape[1] if K is None else K
    pred = predictions(p)
    out = []
    for c in range(K):
        sel = y == c
        if not sel.any():
            raise DomainError(f"class {c} has no samples")
        out.append(float(np.mean(pred[sel] == c)))
    return out


def brier(p, y, positive_class=None):
    """Multiclass Brier score, sum over classes, in [0, 2].

    With ``positive_class`` set, the binary one-vs-rest score for that class.
    """
    p, y = _check(p, y)
    if positive_class is not None:
        target = (y == positive_class).astype(np.float64)
        return float(np.mean((p[:, positive_class] - target) ** 2))
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


@dataclass
class ReliabilityBins:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "mean_confidence": self.mean_confidence.tolist(),
            "accuracy": self.accuracy.tolist(),
        }

    def rows(self):
        for b in range(len(self.counts)):
            yield (self.bin_edges[b], self.bin_edges[b + 1], int(self.counts[b]),
                   self.mean_confidence[b], self.accuracy[b])


def ece(p, y, bins=10):
    """Top-label expected calibration error over equal-width, right-closed bins.

    The first bin also takes confidence exactly 0. Empty bins report 0 for
    their confidence and accuracy and contribute nothing.
    """
    p, y = _check(p, y)
    if bins < 1:
        raise ConfigError("need at least one bin")
    n = len(y)
    conf = p.max(axis=1)
    correct = (predictions(p) == y).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    nz = counts > 0
    mean_conf = np.where(nz, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nz, acc_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / n * np.abs(mean_acc - mean_conf)))
    return value, ReliabilityBins(edges, counts, mean_conf, mean_acc)


@dataclass
class DisagreementMatrix:
    values: np.ndarray
    kind: str

    def to_list(self):
        return self.values.tolist()


def disagreement_rates(ps, y=None):
    """Pairwise fraction of samples on which predicted labels differ.

    Returns ``(matrix, vs_truth)``; ``vs_truth`` is each hypothesis's error
    rate, or None without labels.
    """
    if len(ps) < 2:
        raise DomainError("disagreement needs at least two hypotheses")
    preds = np.stack([predictions(p) for p in ps])
    m = len(ps)
    mat = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            mat[i, j] = mat[j, i] = np.mean(preds[i] != preds[j])
    vs_truth = None
    if y is not None:
        vs_truth = [float(np.mean(preds[i] != np.asarray(y))) for i in range(m)]
    return DisagreementMatrix(mat, "rate"), vs_truth


def mean_disagreement(matrix):
    v = matrix.values if isinstance(matrix, DisagreementMatrix) else np.asarray(matrix)
    m = v.shape[0]
    if m < 2:
        return 0.0
    return float(v[np.triu_indices(m, 1)].mean())


def kl_matrix(ps):
    """Entry (row i, column j) is the batch-mean KL[p_j || p_i].

    Columns index the first KL argument and rows the second.
    """
    if len(ps) < 2:
        raise DomainError("KL matrix needs at least two hypotheses")
    m = len(ps)
    mat = np.zeros((m, m))
    logs = [np.log(np.asarray(p) + EPS) for p in ps]
    for i in range(m):
        for j in range(m):
            if i != j:
                mat[i, j] = np.mean(np.sum(ps[j] * (logs[j] - logs[i]), axis=1))
    return DisagreementMatrix(mat, "kl")


@dataclass
class ErrorProfile:
    """Histogram of per-sample correctness patterns across hypotheses.

    Pattern strings have one character per hypothesis, ``1`` for correct.
    """

    counts: dict
    errors: list = field(default_factory=list)
    new_errors: int | None = None

    def to_dict(self):
        d = {"counts": dict(sorted(self.counts.items()))}
        if self.new_errors is not None:
            d["new_errors"] = self.new_errors
        return d


def hypothesis_error_profile(ps, y, reference=None):
    """Count correctness patterns; ``reference`` is an earlier profile to diff against.

    ``new_errors`` counts (sample, hypothesis) pairs wrong now but right in
    the reference.
    """
    y = np.asarray(y)
    correct = np.stack([predictions(p) == y for p in ps], axis=1)
    patterns = ["".join("1" if c else "0" for c in row) for row in correct]
    errors = [set(np.flatnonzero(~correct[:, m]).tolist()) for m in range(len(ps))]
    new = None
    if reference is not None:
        new = sum(len(now - before) for now, before in zip(errors, reference.errors))
    return ErrorProfile(dict(Counter(patterns)), errors, new)


@dataclass
class AnalysisReport:
    accuracy_anchor: float
    accuracy_ensemble: float
    per_class_accuracy: list
    per_class_average: float
    brier: float
    ece: float
    bins: ReliabilityBins
    disagreement: DisagreementMatrix | None
    kl: DisagreementMatrix | None
    disagreement_vs_truth: list
    mean_disagreement: float
    anchor: int
    anchor_ensemble_agreement: float
    brier_anchor: float
    ece_anchor: float
    error_profile: ErrorProfile
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "accuracy_anchor": self.accuracy_anchor,
            "accuracy_ensemble": self.accuracy_ensemble,
            "per_class_accuracy": self.per_class_accuracy,
            "per_class_average": self.per_class_average,
            "brier": self.brier,
            "ece": self.ece,
            "brier_anchor": self.brier_anchor,
            "ece_anchor": self.ece_anchor,
            "bins": self.bins.to_dict(),
            "disagreement_rate": None if self.disagreement is None else self.disagreement.to_list(),
            "kl_matrix": None if self.kl is None else self.kl.to_list(),
            "disagreement_vs_truth": self.disagreement_vs_truth,
            "mean_disagreement": self.mean_disagreement,
            "anchor": self.anchor,
            "anchor_ensemble_agreement": self.anchor_ensemble_agreement,
            "error_profile": self.error_profile.to_dict(),
        }
        d.update(self.extra)
        return d


def analyze(ps, y, anchor=0, bins=10, reference_profile=None):
    """Full report for M hypothesis outputs on a labeled batch.

    Calibration (``brier``, ``ece``) is measured on the ensemble mean.
    """
    from .hypotheses import ensemble_mean

    y = np.asarray(y)
    ens = ensemble_mean(ps)
    pa = ps[anchor]
    k = ens.shape[1]
    pca = per_class_accuracy(ens, y, k)
    e_val, e_bins = ece(ens, y, bins)
    if len(ps) >= 2:
        rate, vs_truth = disagreement_rates(ps, y)
        kl = kl_matrix(ps)
    else:
        rate, kl = None, None
        vs_truth = [float(np.mean(predictions(ps[0]) != y))]
    return AnalysisReport(
        accuracy_anchor=accuracy(pa, y),
        accuracy_ensemble=accuracy(ens, y),
        per_class_accuracy=pca,
        per_class_average=float(np.mean(pca)),
        brier=brier(ens, y),
        ece=e_val,
        bins=e_bins,
        disagreement=rate,
        kl=kl,
        disagreement_vs_truth=vs_truth,
        mean_disagreement=0.0 if rate is None else mean_disagreement(rate),
        anchor=int(anchor),
        anchor_ensemble_agreement=float(np.mean(predictions(pa) == predictions(ens))),
        brier_anchor=brier(pa, y),
        ece_anchor=ece(pa, y, bins)[0],
        error_profile=hypothesis_error_profile(ps, y, reference_profile),
    )


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_bins_csv(bins, path):
    _write_rows(path, ["edge_lo", "edge_hi", "count", "conf", "acc"], bins.rows())


def write_matrix_csv(matrix, path):
    m = matrix.values.shape[0]
    _write_rows(path, [""] + [f"h{j}" for j in range(m)],
                ([f"h{i}"] + list(matrix.values[i]) for i in range(m)))


def write_predictions_csv(ps, path):
    m = len(ps)
    header = ["index"]
    for j in range(m):
        header += [f"pred_h{j}", f"maxprob_h{j}"]
    preds = [predictions(p) for p in ps]
    conf = [np.asarray(p).max(axis=1) for p in ps]
    rows = []
    for i in range(len(preds[0])):
        row = [i]
        for j in range(m):
            row += [int(preds[j][i]), conf[j][i]]
        rows.append(row)
    _write_rows(path, header, rows)
