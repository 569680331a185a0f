"""Flat ``key = value`` run configuration.

Hyperparameter keys follow the usual table names (``hid``, ``lambda`` ...)::

    dataset = fixtures/cora        # or synth:n=2000,c=5,h=0.23
    model = pcgcn
    dropout = 0.5
    hid = 64
    layers = 2
    lr = 0.01
    wd = 5e-4
    lambda = 1
    beta = 0.5

Lines starting with ``#`` or ``;`` are comments. Unknown keys are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetBundle, SynthSpec, generate_synthetic, load_dataset
from .experiments import ExperimentError, ExperimentSpec
from .model import PCGCNConfig


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        return tuple(conv(p.strip()) for p in s.split(",") if p.strip())
    return parse


def _opt_int_list(s):
    return None if s.strip().lower() in ("", "all") else _list(int)(s)


# config key -> (PCGCNConfig field, parser)
MODEL_KEYS = {
    "dropout": ("dropout", float),
    "hid": ("hidden", int),
    "layers": ("layers", int),
    "lr": ("lr", float),
    "wd": ("wd", float),
    "lambda": ("lam", float),
    "beta": ("beta", float),
    "tau": ("tau", float),
    "epochs": ("epochs", int),
    "patience": ("patience", int),
    "seed": ("seed", int),
    "oracle_fraction": ("oracle_fraction", float),
    "no_hom_p": ("no_hom_p", _bool),
    "no_het_p": ("no_het_p", _bool),
    "no_mp": ("no_mp", _bool),
    "no_cl": ("no_cl", _bool),
    "tie_transforms": ("tie_transforms", _bool),
    "consistency_source": ("consistency_source", str),
    "reduction": ("reduction", str),
}

# experiment keys -> (ExperimentSpec field, parser)
EXPERIMENT_KEYS = {
    "experiment": ("kind", str),
    "models": ("models", _list(str)),
    "replicates": ("replicates", int),
    "budgets": ("budgets", _list(int)),
    "masked_classes": ("masked_classes", _opt_int_list),
    "control_rules": ("control_rules", _list(str)),
    "control_fraction": ("control_fraction", float),
    "ablations": ("ablations", _list(str)),
    "rho_grid": ("rho_grid", _list(float)),
    "buckets": ("buckets", _bool),
}

RUN_KEYS = {
    "dataset": str,
    "model": str,
    "out": str,
    "num_classes": int,
    "row_normalize": _bool,
    "split_file": str,
}

SYNTH_KEYS = {
    "n": ("n", int), "c": ("c", int), "f": ("f", int), "h": ("target_homophily", float),
    "degree": ("mean_degree", float), "sep": ("feature_separation", float), "seed": ("seed", int),
}

ALL_KEYS = set(MODEL_KEYS) | set(EXPERIMENT_KEYS) | set(RUN_KEYS)


@dataclass(frozen=True)
class RunConfig:
    model_config: PCGCNConfig
    dataset: str | None = None
    model: str = "pcgcn"
    out: str = "out"
    num_classes: int | None = None
    row_normalize: bool = False
    split_file: str | None = None
    experiment: ExperimentSpec | None = None
    source: dict = field(default_factory=dict, compare=False)

    def load_bundle(self) -> DatasetBundle:
        if self.dataset is None:
            raise ConfigError("no dataset configured")
        if self.dataset.startswith("synth:"):
            bundle = generate_synthetic(parse_synth(self.dataset[len("synth:"):]))
        else:
            bundle = load_dataset(self.dataset, self.num_classes)
        return bundle.row_normalized() if self.row_normalize else bundle


def parse_synth(text: str) -> SynthSpec:
    kw = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in SYNTH_KEYS:
            raise ConfigError(f"bad synthetic dataset field {part!r}; known: {', '.join(SYNTH_KEYS)}")
        name, conv = SYNTH_KEYS[key]
        try:
            kw[name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"synthetic field {key}: {exc}") from None
    try:
        return SynthSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_pairs(path) -> dict:
    """Parse a config file into a ``{key: raw string}`` dict."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message if hasattr(exc, 'message') else exc}") from None
    return dict(cp["run"])


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def build_run_config(pairs: dict) -> RunConfig:
    """Validate raw pairs against the known keys and build a RunConfig."""
    unknown = sorted(set(pairs) - ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    model_kw, exp_kw, run_kw = {}, {}, {}
    for key, raw in pairs.items():
        try:
            if key in MODEL_KEYS:
                name, conv = MODEL_KEYS[key]
                model_kw[name] = conv(raw)
            elif key in EXPERIMENT_KEYS:
                name, conv = EXPERIMENT_KEYS[key]
                exp_kw[name] = conv(raw)
            else:
                run_kw[key] = RUN_KEYS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    try:
        model_config = PCGCNConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = run_kw.get("model", "pcgcn")
    if model not in ("pcgcn", "gcn", "mlp"):
        raise ConfigError(f"unknown model {model!r}; choose from pcgcn, gcn, mlp")
    experiment = None
    if exp_kw:
        exp_kw.setdefault("models", (model,))
        exp_kw.setdefault("seed", model_config.seed)
        dataset = run_kw.get("dataset", "dataset")
        exp_kw["dataset"] = Path(dataset).name if not dataset.startswith("synth:") else dataset
        try:
            experiment = ExperimentSpec(**exp_kw)
        except ExperimentError as exc:
            raise ConfigError(str(exc)) from None
    dataset = run_kw.get("dataset")
    if dataset is not None and dataset.startswith("synth:"):
        parse_synth(dataset[len("synth:"):])  # validate early
    return RunConfig(model_config=model_config, experiment=experiment, source=dict(pairs), **run_kw)


def load_run_config(path=None, overrides=None) -> RunConfig:
    """File pairs, then overrides. Relative dataset paths in a file are
    resolved against the file's directory."""
    pairs = read_pairs(path) if path else {}
    ds = pairs.get("dataset")
    if path and ds and not ds.startswith("synth:") and not Path(ds).is_absolute():
        pairs["dataset"] = str(Path(path).parent / ds)
    pairs.update(overrides or {})
    return build_run_config(pairs)
