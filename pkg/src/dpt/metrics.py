"""Accuracy, confusion matrices, per-class precision/recall and Fréchet distances."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def accuracy(true_labels, predicted) -> float:
    true_labels, predicted = np.asarray(true_labels), np.asarray(predicted)
    if true_labels.shape != predicted.shape:
        raise MetricError("label arrays differ in length")
    return float(np.mean(true_labels == predicted))


def confusion(true_labels, predicted, C: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t, p = np.asarray(true_labels), np.asarray(predicted)
    if t.shape != p.shape:
        raise MetricError("label arrays differ in length")
    if np.any(t < 0) or np.any(t >= C) or np.any(p < 0) or np.any(p >= C):
        raise MetricError(f"labels outside [0, {C})")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class ClassStats:
    label: int
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None


def per_class_pr(cm: np.ndarray) -> list[ClassStats]:
    out = []
    for y in range(cm.shape[0]):
        tp = int(cm[y, y])
        fp = int(cm[:, y].sum()) - tp
        fn = int(cm[y, :].sum()) - tp
        out.append(ClassStats(y, tp, fp, fn,
                              tp / (tp + fp) if tp + fp else None,
                              tp / (tp + fn) if tp + fn else None))
    return out


@dataclass
class PrDelta:
    label: int
    d_precision: float | None
    d_recall: float | None


def pr_delta(before: list[ClassStats], after: list[ClassStats]) -> list[PrDelta]:
    if len(before) != len(after):
        raise MetricError("class counts differ")

    def diff(a, b):
        return None if a is None or b is None else b - a

    return [PrDelta(b.label, diff(b.precision, a.precision), diff(b.recall, a.recall))
            for b, a in zip(before, after)]


def sorted_deltas(deltas: list[PrDelta], which: str) -> list[tuple[int, float]]:
    """(class, delta) pairs sorted by delta descending, ties by class index; absent deltas dropped."""
    attr = {"precision": "d_precision", "recall": "d_recall"}[which]
    pairs = [(d.label, getattr(d, attr)) for d in deltas if getattr(d, attr) is not None]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def write_sorted_deltas(path, pairs: list[tuple[int, float]], column: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", column])
        for c, v in pairs:
            w.writerow([c, repr(float(v))])


def write_class_stats(path, stats: list[ClassStats]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "tp", "fp", "fn", "precision", "recall"])
        for s in stats:
            w.writerow([s.label, s.tp, s.fp, s.fn,
                        "" if s.precision is None else repr(s.precision),
                        "" if s.recall is None else repr(s.recall)])


# -- Fréchet distance ---------------------------------------------------------

@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def fit_gaussian(samples: np.ndarray) -> GaussianFit:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = X.shape
    if n < d + 1:
        raise MetricError(f"need at least {d + 1} samples to fit a {d}-D Gaussian, got {n}")
    mu = X.mean(axis=0)
    R = X - mu
    S = R.T @ R / (n - 1)
    return GaussianFit(mu, 0.5 * (S + S.T), n)


def _psd_sqrt(S: np.ndarray, tol: float) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise MetricError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(a: GaussianFit, b: GaussianFit, tol: float = 1e-10) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace term uses the eigenvalues of the symmetric matrix S_a^{1/2} S_b S_a^{1/2}.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError("Gaussians differ in dimension")
    ra = _psd_sqrt(a.cov, tol)
    _psd_sqrt(b.cov, tol)  # PSD check only
    M = ra @ b.cov @ ra
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise MetricError(f"product is not PSD (min eigenvalue {w.min():.3e})")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


@dataclass
class GenerationReport:
    per_class_fd: list[float | None]
    pooled_fd: float
    agreement: list[float | None]

    def to_dict(self) -> dict:
        return {"per_class_fd": self.per_class_fd, "pooled_fd": self.pooled_fd, "agreement": self.agreement}


def generation_report(real_x: np.ndarray, real_y: np.ndarray, pseudo_x: np.ndarray, pseudo_y: np.ndarray,
                      classifier, C: int) -> GenerationReport:
    """``classifier`` maps an (n, d) array to predicted labels (a Bayes oracle or a probe wrapper)."""
    d = real_x.shape[1]
    fds, agree = [], []
    for y in range(C):
        r, p = real_x[real_y == y], pseudo_x[pseudo_y == y]
        fds.append(frechet_distance(fit_gaussian(r), fit_gaussian(p))
                   if len(r) > d and len(p) > d else None)
        agree.append(float(np.mean(classifier(p) == y)) if len(p) else None)
    pooled = frechet_distance(fit_gaussian(real_x), fit_gaussian(pseudo_x))
    return GenerationReport(fds, pooled, agree)
