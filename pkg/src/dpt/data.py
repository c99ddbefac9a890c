"""Synthetic Gaussian-mixture benchmarks, semi-supervised splits and CSV persistence."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_normal

from .numcore import ConfigError

UNLABELED = -1
PROVENANCES = ("real", "pseudo")


class ParseError(ValueError):
    pass


@dataclass
class MixtureSpec:
    means: list[list[float]]
    covs: list[list[list[float]]]
    samples_per_class: int = 500
    seed: int | None = None

    @classmethod
    def ring(cls, num_classes: int = 8, radius: float = 4.0, var: float = 0.3, samples_per_class: int = 500,
             seed: int | None = None) -> "MixtureSpec":
        """Default desk benchmark: isotropic 2-D Gaussians with means evenly spaced on a circle."""
        ang = 2 * np.pi * np.arange(num_classes) / num_classes
        means = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
        covs = [(var * np.eye(2)).tolist() for _ in range(num_classes)]
        return cls(means.tolist(), covs, samples_per_class, seed)

    def bayes(self) -> "BayesClassifier":
        """Optimal classifier for this mixture (equal class sizes, so uniform priors)."""
        return _bayes(self)

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("mixture needs at least two classes")
        if len(self.covs) != self.num_classes:
            raise ConfigError("one covariance per class required")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        d = self.dim
        for k, (m, S) in enumerate(zip(self.means, self.covs)):
            S = np.asarray(S, dtype=np.float64)
            if len(m) != d or S.shape != (d, d):
                raise ConfigError(f"class {k}: inconsistent dimensions")
            if not np.allclose(S, S.T) or np.linalg.eigvalsh(S)[0] <= 0:
                raise ConfigError(f"class {k}: covariance is not symmetric positive definite")


def _bayes(spec: "MixtureSpec") -> "BayesClassifier":
    C = spec.num_classes
    return BayesClassifier(np.asarray(spec.means, dtype=np.float64), np.asarray(spec.covs, dtype=np.float64),
                           np.full(C, -np.log(C)))


@dataclass
class BayesClassifier:
    """Exact posterior for a Gaussian mixture with known components and priors."""

    means: np.ndarray
    covs: np.ndarray
    log_priors: np.ndarray

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.stack([multivariate_normal(m, S).logpdf(X).reshape(len(X)) + lp
                         for m, S, lp in zip(self.means, self.covs, self.log_priors)], axis=1)

    def posterior(self, X: np.ndarray) -> np.ndarray:
        lj = self.log_joint(X)
        lj -= lj.max(axis=1, keepdims=True)
        p = np.exp(lj)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_joint(X), axis=1)


@dataclass
class LabeledData:
    ids: np.ndarray
    x: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class Mixture:
    data: LabeledData
    bayes: BayesClassifier
    num_classes: int


def generate_mixture(spec: MixtureSpec, rng: np.random.Generator | None = None, id_offset: int = 0) -> Mixture:
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    C, n = spec.num_classes, spec.samples_per_class
    means = np.asarray(spec.means, dtype=np.float64)
    covs = np.asarray(spec.covs, dtype=np.float64)
    xs = [rng.multivariate_normal(means[k], covs[k], size=n) for k in range(C)]
    x = np.concatenate(xs)
    y = np.repeat(np.arange(C), n)
    order = rng.permutation(len(x))
    data = LabeledData(np.arange(len(x)) + id_offset, x[order], y[order])
    return Mixture(data, spec.bayes(), C)


@dataclass
class SplitSpec:
    labels_per_class: int = 2
    seed: int | None = None

    def validate(self):
        if self.labels_per_class < 1:
            raise ConfigError("labels_per_class must be at least 1")


@dataclass
class SemiDataset:
    """All real items; labels only for the labeled subset S. Hidden truth lives in :class:`HiddenTruth`."""

    ids: np.ndarray
    x: np.ndarray
    labeled_ids: np.ndarray
    labeled_y: np.ndarray
    num_classes: int

    @property
    def N(self) -> int:
        return len(self.labeled_ids)

    @property
    def M(self) -> int:
        return len(self.ids) - self.N

    def labeled_mask(self) -> np.ndarray:
        return np.isin(self.ids, self.labeled_ids)

    def labeled_x(self) -> np.ndarray:
        pos = {int(i): k for k, i in enumerate(self.ids)}
        return self.x[[pos[int(i)] for i in self.labeled_ids]]

    def unlabeled_ids(self) -> np.ndarray:
        return self.ids[~self.labeled_mask()]

    def labels_column(self) -> np.ndarray:
        out = np.full(len(self.ids), UNLABELED)
        lab = dict(zip(self.labeled_ids.tolist(), self.labeled_y.tolist()))
        for k, i in enumerate(self.ids.tolist()):
            if i in lab:
                out[k] = lab[i]
        return out


@dataclass
class HiddenTruth:
    """Ground-truth labels for every real item; for evaluation code only."""

    ids: np.ndarray
    labels: np.ndarray
    _index: dict = field(default=None, repr=False)  # type: ignore[assignment]

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        if self._index is None:
            self._index = {int(i): int(y) for i, y in zip(self.ids, self.labels)}
        return np.array([self._index[int(i)] for i in ids], dtype=int)


def split_semi(data: LabeledData, num_classes: int, split: SplitSpec, rng: np.random.Generator | None = None
               ) -> tuple[SemiDataset, HiddenTruth]:
    split.validate()
    if rng is None:
        rng = np.random.default_rng(split.seed)
    labeled = []
    for k in range(num_classes):
        members = np.flatnonzero(data.labels == k)
        if len(members) < split.labels_per_class:
            raise ConfigError(f"class {k} has {len(members)} items, fewer than {split.labels_per_class}")
        labeled.append(rng.choice(members, size=split.labels_per_class, replace=False))
    pos = np.sort(np.concatenate(labeled))
    semi = SemiDataset(data.ids.copy(), data.x.copy(), data.ids[pos].copy(), data.labels[pos].copy(), num_classes)
    return semi, HiddenTruth(data.ids.copy(), data.labels.copy())


# -- CSV ---------------------------------------------------------------------

@dataclass
class Table:
    """Rows of the shared CSV layout: id,label,provenance,x_1..x_d."""

    ids: np.ndarray
    labels: np.ndarray
    provenance: list[str]
    x: np.ndarray

    def __len__(self):
        return len(self.ids)


def write_table(path, table: Table):
    d = table.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "provenance"] + [f"x_{j + 1}" for j in range(d)])
        for i, y, p, row in zip(table.ids, table.labels, table.provenance, table.x):
            w.writerow([int(i), int(y), p] + [repr(float(v)) for v in row])


def read_table(path) -> Table:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 3
    if header[:3] != ["id", "label", "provenance"] or header[3:] != [f"x_{j + 1}" for j in range(d)] or d < 1:
        raise ParseError(f"{path}:1: bad header {header!r}")
    ids, labels, prov, xs = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 3:
            raise ParseError(f"{path}:{lineno}: expected {d + 3} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            xs.append([float(v) for v in row[3:]])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
        if row[2] not in PROVENANCES:
            raise ParseError(f"{path}:{lineno}: unknown provenance {row[2]!r}")
        prov.append(row[2])
    return Table(np.array(ids, dtype=int), np.array(labels, dtype=int), prov,
                 np.array(xs, dtype=np.float64).reshape(len(ids), d))


def labeled_to_table(data: LabeledData, provenance: str = "real") -> Table:
    return Table(data.ids, data.labels, [provenance] * len(data), data.x)


def table_to_labeled(t: Table) -> LabeledData:
    return LabeledData(t.ids, t.x, t.labels)


def semi_to_table(semi: SemiDataset) -> Table:
    return Table(semi.ids, semi.labels_column(), ["real"] * len(semi.ids), semi.x)


def table_to_semi(t: Table, num_classes: int) -> SemiDataset:
    mask = t.labels != UNLABELED
    return SemiDataset(t.ids, t.x, t.ids[mask], t.labels[mask], num_classes)


def write_truth(path, truth: HiddenTruth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for i, y in zip(truth.ids, truth.labels):
            w.writerow([int(i), int(y)])


def read_truth(path) -> HiddenTruth:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "label"]:
        raise ParseError(f"{path}:1: bad header")
    try:
        ids = [int(r[0]) for r in rows[1:]]
        labels = [int(r[1]) for r in rows[1:]]
    except (ValueError, IndexError) as e:
        raise ParseError(f"{path}: {e}") from None
    return HiddenTruth(np.array(ids, dtype=int), np.array(labels, dtype=int))
