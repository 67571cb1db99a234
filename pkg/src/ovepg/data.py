"""Dataset loading, Iris splits and synthetic few-shot tasks."""

import csv
from dataclasses import dataclass
from importlib import resources
from typing import List, Sequence

import numpy as np

from .errors import InvalidArgument, MalformedDataset
from .likelihoods import labels_to_onehot, onehot_to_labels

IRIS_CLASSES = ("setosa", "versicolor", "virginica")
IRIS_SIZES = (1, 2, 3, 4, 5, 10, 15, 20, 25, 30)
IRIS_MAX_PER_CLASS = 30


@dataclass
class LabeledDesignMatrix:
    X: np.ndarray
    Y: np.ndarray
    class_names: List[str]

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.shape[0] != self.Y.shape[0]:
            raise InvalidArgument("X and Y have different numbers of rows")
        if self.Y.shape[1] != len(self.class_names):
            raise InvalidArgument("class_names does not match the number of label columns")
        if not np.all(np.isfinite(self.X)):
            raise InvalidArgument("non-finite feature values")

    @property
    def labels(self):
        return onehot_to_labels(self.Y)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def C(self):
        return self.Y.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return LabeledDesignMatrix(self.X[idx], self.Y[idx], list(self.class_names))


@dataclass
class EpisodeTask:
    support: LabeledDesignMatrix
    query: LabeledDesignMatrix

    def __post_init__(self):
        if list(self.support.class_names) != list(self.query.class_names):
            raise InvalidArgument("support and query must share the same class order")


def _clean_label(raw):
    name = raw.strip()
    return name[len("Iris-"):] if name.startswith("Iris-") else name


def default_iris_path():
    return str(resources.files("ovepg") / "data" / "iris.csv")


def load_iris_2d(path=None):
    """Iris with only sepal length and width; classes in alphabetical order."""
    path = path or default_iris_path()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedDataset("empty file", row=0)
        if len(header) != 5:
            raise MalformedDataset(f"expected 5 columns, found {len(header)}", row=1)
        feats, names = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != 5:
                raise MalformedDataset(f"expected 5 columns, found {len(row)}", row=rownum)
            label = _clean_label(row[4])
            if label not in IRIS_CLASSES:
                raise MalformedDataset(f"unknown class {row[4]!r}", row=rownum)
            try:
                feats.append([float(v) for v in row[:4]])
            except ValueError:
                raise MalformedDataset("non-numeric feature", row=rownum) from None
            names.append(label)
    if not feats:
        raise MalformedDataset("no data rows", row=1)
    classes = sorted(IRIS_CLASSES)
    labels = np.array([classes.index(n) for n in names])
    if np.bincount(labels, minlength=len(classes)).min() == 0:
        raise MalformedDataset("a class has no examples", row=len(names) + 1)
    X = np.array(feats)[:, :2]
    return LabeledDesignMatrix(X, labels_to_onehot(labels, len(classes)), classes)


def load_csv(path, class_names: Sequence[str] = None):
    """Generic ``f1,...,fD,label`` CSV with a header row.

    Classes are ordered alphabetically unless ``class_names`` fixes the order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise MalformedDataset("need a header with at least one feature and a label", row=1)
        width = len(header)
        feats, names = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise MalformedDataset(f"expected {width} columns, found {len(row)}", row=rownum)
            try:
                feats.append([float(v) for v in row[:-1]])
            except ValueError:
                raise MalformedDataset("non-numeric feature", row=rownum) from None
            names.append(row[-1].strip())
    if not feats:
        raise MalformedDataset("no data rows", row=1)
    classes = list(class_names) if class_names is not None else sorted(set(names))
    unknown = [(i, n) for i, n in enumerate(names) if n not in classes]
    if unknown:
        raise MalformedDataset(f"unknown class {unknown[0][1]!r}", row=unknown[0][0] + 2)
    labels = np.array([classes.index(n) for n in names])
    return LabeledDesignMatrix(np.array(feats), labels_to_onehot(labels, len(classes)), classes)


def write_csv(path, data: LabeledDesignMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{d + 1}" for d in range(data.X.shape[1])] + ["label"])
        for x, y in zip(data.X, data.labels):
            w.writerow([repr(float(v)) for v in x] + [data.class_names[y]])


def split_seed(seed, repeat):
    return np.random.SeedSequence(seed, spawn_key=(repeat,))


def stratified_split(data: LabeledDesignMatrix, per_class, rng):
    """Sample ``per_class`` support examples from each class; the rest is the query set."""
    labels = data.labels
    support = []
    for c in range(data.C):
        members = np.flatnonzero(labels == c)
        if per_class >= members.size:
            raise InvalidArgument(f"class {data.class_names[c]} has only {members.size} examples")
        support.extend(rng.choice(members, size=per_class, replace=False))
    support = np.sort(np.array(support))
    query = np.setdiff1d(np.arange(data.N), support)
    return EpisodeTask(data.subset(support), data.subset(query))


def iris_splits(data: LabeledDesignMatrix, per_class, repeats=200, seed=0):
    """Stratified support/query splits; split ``r`` depends only on ``(seed, r)``."""
    if not 1 <= per_class <= IRIS_MAX_PER_CLASS:
        raise InvalidArgument(f"per_class must be in 1..{IRIS_MAX_PER_CLASS}, got {per_class}")
    if repeats < 1:
        raise InvalidArgument("repeats must be >= 1")
    out = []
    for r in range(repeats):
        gen = np.random.Generator(np.random.Philox(split_seed(seed, r)))
        out.append(stratified_split(data, per_class, gen))
    return out


def synth_blobs(C, per_class, D=2, separation=3.0, seed=0, query_per_class=None):
    """Unit-variance Gaussian clusters centred on scaled simplex vertices.

    Centres are the first C standard basis vectors of R^C, shifted to zero
    mean and projected onto D dimensions when D < C; every pair is
    ``separation`` apart.
    """
    if C < 2:
        raise InvalidArgument("need at least two classes")
    if D < 1:
        raise InvalidArgument("D must be >= 1")
    query_per_class = per_class if query_per_class is None else query_per_class
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    centres = _simplex_vertices(C, D) * separation
    names = [f"class{c}" for c in range(C)]

    def draw(n):
        labels = np.repeat(np.arange(C), n)
        X = centres[labels] + gen.standard_normal((labels.size, D))
        return LabeledDesignMatrix(X, labels_to_onehot(labels, C), names)

    return EpisodeTask(draw(per_class), draw(query_per_class))


def _simplex_vertices(C, D):
    """C points with pairwise distance 1, embedded in D dimensions when possible."""
    V = (np.eye(C) - 1.0 / C) / np.sqrt(2.0)
    # orthonormal coordinates of the (C-1)-dimensional simplex
    U, s, _ = np.linalg.svd(V, full_matrices=False)
    coords = (U * s)[:, : C - 1]
    if D >= C - 1:
        return np.hstack([coords, np.zeros((C, D - (C - 1)))])
    return coords[:, :D]
