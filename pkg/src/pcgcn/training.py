"""Full-batch training with early stopping, accuracy and bucketed analyses."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import DatasetBundle, SplitSpec
from .graph import UNREACHABLE, node_homophily, normalize_adjacency, shortest_label_distance
from .model import Model, PCGCNConfig, build_model

log = logging.getLogger(__name__)

HOMOPHILY_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
SLD_BUCKETS = ("1", "2", "3", ">=4", "unreachable")


class DivergenceError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class SeedStreams:
    """Independent generators derived from one run seed."""

    init: np.random.Generator
    dropout: np.random.Generator
    aux: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "SeedStreams":
        init, drop, aux = np.random.SeedSequence(seed).spawn(3)
        return cls(*(np.random.default_rng(s) for s in (init, drop, aux)))


@dataclass
class TrainReport:
    model: str
    seed: int
    config: dict
    history: list = field(default_factory=list)  # one dict per evaluated epoch
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = float("nan")
    wall_time: float = 0.0
    test_logits: np.ndarray | None = field(default=None, repr=False)
    model_obj: Model | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "config": self.config,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
            "epochs_run": len(self.history) - 1,
            "history": self.history,
            "wall_time": self.wall_time,
        }


@dataclass
class BucketReport:
    labels: list
    accuracy: list  # NaN for empty buckets
    counts: list
    correct: list

    def as_rows(self):
        return [
            {"bucket": b, "count": n, "correct": k, "accuracy": a}
            for b, n, k, a in zip(self.labels, self.counts, self.correct, self.accuracy)
        ]


def predictions(logits) -> np.ndarray:
    # np.argmax returns the first maximum: ties -> lowest class index
    return np.argmax(logits, axis=1)


def evaluate_accuracy(logits, labels, mask) -> float:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("accuracy over an empty mask")
    labels = getattr(labels, "labels", labels)
    return float((predictions(logits[idx]) == labels[idx]).mean())


def _bucket(labels, assign, logits, y, mask):
    idx = np.flatnonzero(mask)
    hit = predictions(logits[idx]) == y[idx]
    b = assign[idx]
    counts, correct, acc = [], [], []
    for k in range(len(labels)):
        sel = b == k
        n, r = int(sel.sum()), int(hit[sel].sum())
        counts.append(n)
        correct.append(r)
        acc.append(r / n if n else float("nan"))
    return BucketReport(list(labels), acc, counts, correct)


def bucket_by_homophily(logits, bundle: DatasetBundle, mask, num_buckets: int = 5, report=None) -> BucketReport:
    """Accuracy per node-homophily interval [0,.2), ..., [.8, 1.0].

    Nodes with undefined homophily (no labeled neighbor) land in an extra
    trailing "undefined" bucket so counts always add up.
    """
    report = report or node_homophily(bundle.graph, bundle.labels)
    h = report.node_ratios
    edges = np.linspace(0.0, 1.0, num_buckets + 1)
    names = [f"[{edges[k]:.1f},{edges[k + 1]:.1f}{']' if k == num_buckets - 1 else ')'}" for k in range(num_buckets)]
    assign = np.full(len(h), num_buckets)
    ok = ~np.isnan(h)
    assign[ok] = np.minimum((h[ok] * num_buckets).astype(np.int64), num_buckets - 1)
    # guard against 0.2*5 = 0.99999... style flooring
    for k in range(1, num_buckets):
        assign[ok & (assign == k - 1) & (h >= edges[k])] = k
    return _bucket(names + ["undefined"], assign, logits, bundle.labels.labels, mask)


def bucket_by_sld(logits, bundle: DatasetBundle, split: SplitSpec, mask, sld=None) -> BucketReport:
    """Accuracy per shortest-label-distance bucket: 1, 2, 3, >=4, unreachable."""
    if sld is None:
        sld = shortest_label_distance(bundle.graph, bundle.labels, split.train)
    assign = np.where(sld == UNREACHABLE, 4, np.clip(sld, 1, 4) - 1)
    # distance 0 only happens for training nodes; they are never in the test mask
    return _bucket(list(SLD_BUCKETS), assign, logits, bundle.labels.labels, mask)


def train(bundle: DatasetBundle, split: SplitSpec, config: PCGCNConfig, model_kind: str = "pcgcn",
          adj=None, keep_logits: bool = False, on_epoch=None) -> TrainReport:
    """Train one model; test accuracy is read once, at the best-validation epoch."""
    start = time.perf_counter()
    streams = SeedStreams.from_seed(config.seed)
    adj = adj if adj is not None else normalize_adjacency(bundle.graph)
    model = build_model(model_kind, bundle, config, split.train, streams.init, adj, streams.aux)
    opt = nx.Adam(lr=config.lr, weight_decay=config.wd)
    y = bundle.labels.labels
    report = TrainReport(model_kind, config.seed, config.snapshot())

    def evaluate(epoch, train_loss):
        logits = model.predict()
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": evaluate_accuracy(logits, y, split.train) if split.train.any() else float("nan"),
            "val_loss": nx.masked_cross_entropy(logits, y, split.val, config.reduction)[0] if split.val.any() else float("nan"),
            "val_accuracy": evaluate_accuracy(logits, y, split.val) if split.val.any() else float("nan"),
        }
        report.history.append(row)
        return logits, row

    best_state = {n: p.value.copy() for n, p in model.params.items()}
    logits, row = evaluate(0, None)
    best_val = row["val_accuracy"]
    best_epoch, stale = 0, 0
    for epoch in range(1, config.epochs + 1):
        loss, _ = model.loss_and_grad(training=True, rng=streams.dropout)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        opt.step(model.parameters())
        logits, row = evaluate(epoch, loss)
        if on_epoch is not None:
            on_epoch(model, row)
        if row["val_accuracy"] > best_val:
            best_val, best_epoch, stale = row["val_accuracy"], epoch, 0
            best_state = {n: p.value.copy() for n, p in model.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break

    for name, value in best_state.items():
        model.params[name].value = value
    best_logits = model.predict()
    report.best_epoch = best_epoch
    report.best_val_accuracy = best_val
    report.test_accuracy = evaluate_accuracy(best_logits, y, split.test) if split.test.any() else float("nan")
    report.wall_time = time.perf_counter() - start
    if keep_logits:
        report.test_logits = best_logits
    report.model_obj = model
    log.debug("%s seed=%d best_epoch=%d val=%.4f test=%.4f", model_kind, config.seed,
              best_epoch, best_val, report.test_accuracy)
    return report
