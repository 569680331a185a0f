"""Experiment protocols: main, label budget, missing class, partial control,
ablation and match oracle.

Replicate ``r`` of an experiment with base seed ``s`` uses seed ``s + r`` both
for its split and for model initialization, so every cell of a table sees
the same splits.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetBundle, make_budget_split, make_splits, mask_classes
from .graph import node_homophily, normalize_adjacency, shortest_label_distance
from .model import PCGCNConfig
from .training import bucket_by_homophily, bucket_by_sld, train

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("main", "label-budget", "missing-class", "partial-control", "ablation", "match-oracle")
CONTROL_RULES = ("random", "min-degree", "max-degree")
ABLATIONS = {
    "w/o Hom-P": {"no_hom_p": True},
    "w/o Het-P": {"no_het_p": True},
    "w/o MP": {"no_mp": True},
    "w/o CL": {"no_cl": True},
}
DEFAULT_BUDGETS = (2, 5, 10, 20, 40, 70)
DEFAULT_RHO = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
PCGCN_ONLY = ("partial-control", "ablation", "match-oracle")


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "main"
    models: tuple = ("pcgcn",)
    dataset: str = "dataset"
    replicates: int = 10
    seed: int = 0
    budgets: tuple = DEFAULT_BUDGETS
    masked_classes: tuple | None = None  # None -> every class in turn
    control_rules: tuple = CONTROL_RULES
    control_fraction: float = 0.1
    ablations: tuple = tuple(ABLATIONS)
    rho_grid: tuple = DEFAULT_RHO
    buckets: bool = True

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ExperimentError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(EXPERIMENT_KINDS)}")
        if self.replicates < 1:
            raise ExperimentError("replicates must be >= 1")
        if not self.models:
            raise ExperimentError("no model given")
        for m in self.models:
            if m not in ("pcgcn", "gcn", "mlp"):
                raise ExperimentError(f"unknown model {m!r}")
        if self.kind in PCGCN_ONLY and set(self.models) != {"pcgcn"}:
            raise ExperimentError(f"{self.kind} experiments only apply to pcgcn")
        if self.kind == "label-budget" and (not self.budgets or min(self.budgets) < 1):
            raise ExperimentError("label budgets must be positive integers")
        if self.kind == "partial-control":
            if not 0 <= self.control_fraction <= 1:
                raise ExperimentError("control fraction must lie in [0, 1]")
            bad = set(self.control_rules) - set(CONTROL_RULES)
            if bad:
                raise ExperimentError(f"unknown control rule(s) {sorted(bad)}")
        if self.kind == "ablation":
            bad = set(self.ablations) - set(ABLATIONS)
            if bad:
                raise ExperimentError(f"unknown ablation(s) {sorted(bad)}")
        if self.kind == "match-oracle" and any(not 0 <= r <= 1 for r in self.rho_grid):
            raise ExperimentError("rho values must lie in [0, 1]")


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    fields: list  # kind-specific column names
    rows: list  # dicts: dataset, model, *fields, mean, std, n_runs
    runs: list  # per-run report dicts
    buckets: dict = field(default_factory=dict)  # analysis name -> rows

    def row(self, **match):
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]

    def to_csv(self) -> str:
        cols = ["dataset", "model", *self.fields, "mean", "std", "n_runs"]
        return _csv(cols, self.rows)

    def bucket_csv(self, name) -> str:
        return _csv(["dataset", "model", "bucket", "count", "correct", "accuracy"], self.buckets[name])

    def to_json(self) -> str:
        doc = {"kind": self.spec.kind, "dataset": self.spec.dataset, "rows": self.rows, "runs": self.runs}
        return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in cols})
    return buf.getvalue()


def control_mask(bundle: DatasetBundle, rule: str, fraction: float, seed: int) -> np.ndarray:
    """δ vector with ``round(fraction * n)`` nodes switched off by ``rule``."""
    n = bundle.num_nodes
    k = int(round(fraction * n))
    deg = bundle.graph.degrees
    ids = np.arange(n)
    if rule == "random":
        off = np.random.default_rng([seed, 11]).choice(n, size=k, replace=False)
    elif rule == "min-degree":
        off = np.lexsort((ids, deg))[:k]
    elif rule == "max-degree":
        off = np.lexsort((ids, -deg))[:k]
    else:
        raise ExperimentError(f"unknown control rule {rule!r}")
    mask = np.ones(n, dtype=bool)
    mask[off] = False
    return mask


def _cells(spec: ExperimentSpec, bundle: DatasetBundle, base: PCGCNConfig):
    """Yield ``(fields, model, split_fn, config_fn)`` per table cell."""
    std = lambda seed: make_splits(bundle.labels, seed=seed)
    same = lambda cfg, seed: cfg
    for model in spec.models:
        if spec.kind == "main":
            yield {}, model, std, same
        elif spec.kind == "label-budget":
            for k in spec.budgets:
                yield {"per_class": int(k)}, model, (lambda seed, k=k: make_budget_split(bundle.labels, k, seed)), same
        elif spec.kind == "missing-class":
            yield {"masked_class": "none"}, model, std, same
            classes = spec.masked_classes if spec.masked_classes is not None else range(bundle.num_classes)
            for c in classes:
                yield ({"masked_class": int(c)}, model,
                       (lambda seed, c=c: mask_classes(bundle, std(seed), [c])), same)
        elif spec.kind == "partial-control":
            yield {"control": "full", "fraction": 0.0}, model, std, same
            for rule in spec.control_rules:
                fn = lambda cfg, seed, rule=rule: replace(
                    cfg, control_mask=tuple(control_mask(bundle, rule, spec.control_fraction, seed)))
                yield {"control": rule, "fraction": float(spec.control_fraction)}, model, std, fn
        elif spec.kind == "ablation":
            yield {"variant": "main"}, model, std, same
            for name in spec.ablations:
                yield {"variant": name}, model, std, (lambda cfg, seed, kw=ABLATIONS[name]: replace(cfg, **kw))
        elif spec.kind == "match-oracle":
            for rho in spec.rho_grid:
                yield {"rho": float(rho)}, model, std, (lambda cfg, seed, rho=rho: replace(cfg, oracle_fraction=float(rho)))


def _field_names(kind):
    return {
        "main": [],
        "label-budget": ["per_class"],
        "missing-class": ["masked_class"],
        "partial-control": ["control", "fraction"],
        "ablation": ["variant"],
        "match-oracle": ["rho"],
    }[kind]


def _merge_buckets(acc, name, dataset, model, report):
    rows = acc.setdefault(name, {})
    for r in report.as_rows():
        key = (model, r["bucket"])
        cell = rows.setdefault(key, {"dataset": dataset, "model": model, "bucket": r["bucket"], "count": 0, "correct": 0})
        cell["count"] += r["count"]
        cell["correct"] += r["correct"]


def run_experiment(spec: ExperimentSpec, bundle: DatasetBundle, base: PCGCNConfig) -> ExperimentResult:
    """Run every cell of ``spec`` for ``spec.replicates`` seeds and aggregate."""
    adj = normalize_adjacency(bundle.graph)
    hom = node_homophily(bundle.graph, bundle.labels) if spec.buckets and spec.kind == "main" else None
    rows, runs, buckets = [], [], {}
    for fields_, model, split_fn, config_fn in _cells(spec, bundle, base):
        accs = []
        for r in range(spec.replicates):
            seed = spec.seed + r
            split = split_fn(seed)
            cfg = config_fn(replace(base, seed=seed), seed)
            rep = train(bundle, split, cfg, model, adj=adj, keep_logits=hom is not None)
            accs.append(rep.test_accuracy)
            doc = rep.to_dict()
            doc.pop("wall_time")
            doc["config"].pop("control_mask", None)
            runs.append({"dataset": spec.dataset, **fields_, "replicate": r, "report": doc})
            if hom is not None:
                sld = shortest_label_distance(bundle.graph, bundle.labels, split.train)
                _merge_buckets(buckets, "homophily", spec.dataset, model,
                               bucket_by_homophily(rep.test_logits, bundle, split.test, report=hom))
                _merge_buckets(buckets, "sld", spec.dataset, model,
                               bucket_by_sld(rep.test_logits, bundle, split, split.test, sld=sld))
        accs = np.asarray(accs)
        row = {"dataset": spec.dataset, "model": model, **fields_,
               "mean": float(accs.mean()), "std": float(accs.std()), "n_runs": len(accs)}
        log.info("%s %s %s mean=%.4f std=%.4f", spec.kind, model, fields_, row["mean"], row["std"])
        rows.append(row)
    flat = {}
    for name, cells in buckets.items():
        flat[name] = []
        for cell in cells.values():
            cell["accuracy"] = cell["correct"] / cell["count"] if cell["count"] else float("nan")
            flat[name].append(cell)
    return ExperimentResult(spec, _field_names(spec.kind), rows, runs, flat)
