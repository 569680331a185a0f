"""Dataset bundles on disk, splits, class masking and synthetic graphs.

On-disk layout of a bundle directory::

    graph.edges    one "u v" pair per line, 0-indexed
    features.csv   n rows of f comma-separated reals
    labels.txt     one integer per line, -1 for unlabeled
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, LabelSet, UNLABELED, build_graph

EDGES_FILE = "graph.edges"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.txt"
DEFAULT_RATIOS = (0.48, 0.32, 0.20)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetBundle:
    graph: Graph
    features: np.ndarray
    labels: LabelSet
    name: str = "dataset"

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.shape[0] != n or len(self.labels) != n:
            raise DataError(
                f"row counts disagree: graph {n}, features {self.features.shape[0]}, "
                f"labels {len(self.labels)}"
            )
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def row_normalized(self) -> "DatasetBundle":
        sums = self.features.sum(axis=1, keepdims=True)
        sums[sums == 0] = 1.0
        return DatasetBundle(self.graph, self.features / sums, self.labels, self.name)


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int | None = None
    ratios: tuple = DEFAULT_RATIOS

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=bool))
        if (self.train & self.val).any() or (self.train & self.test).any() or (self.val & self.test).any():
            raise DataError("split masks overlap")

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": np.flatnonzero(self.train).tolist(),
            "val": np.flatnonzero(self.val).tolist(),
            "test": np.flatnonzero(self.test).tolist(),
        })

    @classmethod
    def from_json(cls, text: str, num_nodes: int) -> "SplitSpec":
        doc = json.loads(text)
        masks = {}
        for name in ("train", "val", "test"):
            m = np.zeros(num_nodes, dtype=bool)
            m[np.asarray(doc[name], dtype=np.int64)] = True
            masks[name] = m
        return cls(seed=doc.get("seed"), ratios=tuple(doc.get("ratios", DEFAULT_RATIOS)), **masks)


def _read_lines(path: Path):
    if not path.is_file():
        raise DataError(f"{path}: missing file")
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line


def load_dataset(directory, num_classes: int | None = None, name: str | None = None) -> DatasetBundle:
    directory = Path(directory)
    labels = []
    for lineno, line in _read_lines(directory / LABELS_FILE):
        try:
            labels.append(int(line))
        except ValueError:
            raise DataError(f"{directory / LABELS_FILE}:{lineno}: not an integer: {line!r}") from None
        if labels[-1] < UNLABELED:
            raise DataError(f"{directory / LABELS_FILE}:{lineno}: negative label {labels[-1]}")
    labels = np.array(labels, dtype=np.int64)
    n = len(labels)
    inferred = int(labels.max()) + 1 if n else 0
    if num_classes is None:
        num_classes = max(inferred, 2)
    elif inferred > num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0]) + 1
        raise DataError(f"{directory / LABELS_FILE}:{bad}: label {labels[bad - 1]} >= num_classes {num_classes}")

    rows = []
    width = None
    fpath = directory / FEATURES_FILE
    for lineno, line in _read_lines(fpath):
        try:
            row = np.array(line.split(","), dtype=np.float64)
        except ValueError:
            raise DataError(f"{fpath}:{lineno}: unparsable value") from None
        if width is None:
            width = row.size
        elif row.size != width:
            raise DataError(f"{fpath}:{lineno}: ragged row with {row.size} values, expected {width}")
        rows.append(row)
    if len(rows) != n:
        raise DataError(f"{fpath}: {len(rows)} feature rows but {n} labels")
    features = np.array(rows) if rows else np.zeros((0, 0))

    epath = directory / EDGES_FILE
    edges = []
    for lineno, line in _read_lines(epath):
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{epath}:{lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{epath}:{lineno}: node ids must be integers") from None
        if not (0 <= u < n and 0 <= v < n):
            raise DataError(f"{epath}:{lineno}: node id out of range [0, {n})")
        edges.append((u, v))
    graph = build_graph(np.array(edges, dtype=np.int64).reshape(-1, 2), n)
    return DatasetBundle(graph, features, LabelSet(labels, num_classes), name or directory.name)


def save_dataset(bundle: DatasetBundle, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = bundle.graph.edge_pairs()
    with open(directory / EDGES_FILE, "w") as fh:
        fh.writelines(f"{u} {v}\n" for u, v in pairs)
    # %.17g round-trips float64 exactly
    np.savetxt(directory / FEATURES_FILE, bundle.features, fmt="%.17g", delimiter=",")
    np.savetxt(directory / LABELS_FILE, bundle.labels.labels, fmt="%d")
    return directory


def make_splits(labels: LabelSet, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitSpec:
    """Per-class stratified split; flooring remainders go to test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be three nonnegative reals summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    n = len(labels)
    train, val, test = (np.zeros(n, dtype=bool) for _ in range(3))
    for c in range(labels.num_classes):
        idx = np.flatnonzero(labels.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = math.floor(ratios[0] * idx.size + 1e-9)
        n_val = math.floor(ratios[1] * idx.size + 1e-9)
        train[idx[:n_train]] = True
        val[idx[n_train:n_train + n_val]] = True
        test[idx[n_train + n_val:]] = True
    return SplitSpec(train, val, test, seed, ratios)


def make_budget_split(labels: LabelSet, per_class: int, seed: int = 0) -> SplitSpec:
    """``per_class`` training nodes per class, the rest split 32:20 into val/test."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    train, val, test = (np.zeros(n, dtype=bool) for _ in range(3))
    rest = []
    for c in range(labels.num_classes):
        idx = np.flatnonzero(labels.labels == c)
        idx = idx[rng.permutation(idx.size)]
        train[idx[:per_class]] = True
        rest.append(idx[per_class:])
    rest = np.concatenate(rest) if rest else np.zeros(0, np.int64)
    rest = rest[rng.permutation(rest.size)]
    n_val = math.floor(rest.size * 0.32 / 0.52 + 1e-9)
    val[rest[:n_val]] = True
    test[rest[n_val:]] = True
    return SplitSpec(train, val, test, seed, DEFAULT_RATIOS)


def mask_classes(bundle: DatasetBundle, split: SplitSpec, classes) -> SplitSpec:
    """Drop the given classes from the training mask only."""
    classes = sorted(set(int(c) for c in classes))
    if any(c < 0 or c >= bundle.num_classes for c in classes):
        raise DataError(f"class ids {classes} out of range [0, {bundle.num_classes})")
    if len(classes) >= bundle.num_classes:
        raise DataError("cannot mask every class")
    hidden = np.isin(bundle.labels.labels, classes)
    return SplitSpec(split.train & ~hidden, split.val, split.test, split.seed, split.ratios)


@dataclass(frozen=True)
class SynthSpec:
    n: int = 1000
    c: int = 4
    f: int = 32
    target_homophily: float = 0.5
    mean_degree: float = 10.0
    feature_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0 or self.c < 2 or self.f <= 0 or self.mean_degree <= 0:
            raise DataError("synthetic spec needs n > 0, c >= 2, f > 0, mean_degree > 0")
        if self.feature_separation < 0:
            raise DataError("feature_separation must be nonnegative")
        if not 0 <= self.target_homophily <= 1:
            raise DataError(f"target homophily must lie in [0, 1], got {self.target_homophily}")
        if self.mean_degree >= self.n:
            raise DataError(f"mean degree {self.mean_degree} infeasible for {self.n} nodes")
        if self.n < self.c:
            raise DataError("need at least one node per class")


def generate_synthetic(spec: SynthSpec) -> DatasetBundle:
    """Planted-partition graph whose edges are intra-class with probability h.

    Every node initiates a Poisson(mean_degree / 2) number of edges, so the
    realized mean degree after symmetrization is close to ``mean_degree``.
    Features are spherical unit Gaussians around class means placed at
    pairwise distance ``feature_separation`` (orthogonal directions, so this
    holds exactly when f >= c; with fewer features the means are random
    directions of norm ``feature_separation / sqrt(2)``).
    """
    rng = np.random.default_rng(spec.seed)
    n, c = spec.n, spec.c
    labels = np.arange(n) % c
    labels = labels[rng.permutation(n)]
    members = [np.flatnonzero(labels == k) for k in range(c)]
    others = [np.flatnonzero(labels != k) for k in range(c)]

    draws = rng.poisson(spec.mean_degree / 2.0, size=n)
    src = np.repeat(np.arange(n), draws)
    intra = rng.random(src.size) < spec.target_homophily
    dst = np.empty_like(src)
    for k in range(c):
        own = labels[src] == k
        sel = own & intra
        pool = members[k]
        if sel.any():
            if pool.size < 2:
                raise DataError(f"class {k} has a single node; cannot draw intra-class edges")
            # sample from the class excluding the source node itself
            pos = np.searchsorted(pool, src[sel])
            pick = rng.integers(0, pool.size - 1, size=sel.sum())
            pick = pick + (pick >= pos)
            dst[sel] = pool[pick]
        sel = own & ~intra
        if sel.any():
            dst[sel] = others[k][rng.integers(0, others[k].size, size=sel.sum())]
    graph = build_graph(np.stack([src, dst], axis=1), n, strict=True)

    if spec.f >= c:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.f, c)))
        means = basis.T * (spec.feature_separation / math.sqrt(2.0))
    else:
        means = rng.standard_normal((c, spec.f))
        means *= spec.feature_separation / math.sqrt(2.0) / np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + rng.standard_normal((n, spec.f))
    name = f"synth-n{n}-c{c}-h{spec.target_homophily:g}-s{spec.seed}"
    return DatasetBundle(graph, features, LabelSet(labels, c), name)
