"""``pcgcn`` command line: train, experiment, analyze, synth.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
Failures print one line ``pcgcn: error[<kind>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config, parse_overrides, parse_synth
from .data import DataError, SplitSpec, make_splits, mask_classes, save_dataset, generate_synthetic, SynthSpec, load_dataset
from .experiments import ExperimentError, ExperimentSpec, run_experiment
from .graph import UNREACHABLE, GraphError, edge_homophily, node_homophily, shortest_label_distance
from .model import save_checkpoint
from .training import SLD_BUCKETS, DivergenceError, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code, kind, msg):
        super().__init__(msg)
        self.code, self.kind = code, kind


def _overrides(args) -> dict:
    pairs = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    if getattr(args, "model", None) is not None:
        pairs["model"] = args.model
    if getattr(args, "out", None) is not None:
        pairs["out"] = args.out
    return pairs


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_split(cfg: RunConfig, bundle):
    if cfg.split_file:
        try:
            return SplitSpec.from_json(Path(cfg.split_file).read_text(), bundle.num_nodes)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{cfg.split_file}: {exc}") from None
    return make_splits(bundle.labels, seed=cfg.model_config.seed)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    bundle = cfg.load_bundle()
    split = _load_split(cfg, bundle)
    report = train(bundle, split, cfg.model_config, cfg.model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["dataset"] = bundle.name
    doc["split_seed"] = split.seed
    _write_json(out / "report.json", doc)
    save_checkpoint(out / "model.ckpt", report.model_obj)
    print(f"test_accuracy={report.test_accuracy:.4f} best_epoch={report.best_epoch} out={out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    path = args.spec or args.config
    if path is None:
        raise ConfigError("experiment needs a spec file")
    cfg = load_run_config(path, _overrides(args))
    spec = cfg.experiment or ExperimentSpec(models=(cfg.model,), dataset=Path(cfg.dataset or "dataset").name,
                                            seed=cfg.model_config.seed)
    bundle = cfg.load_bundle()
    result = run_experiment(spec, bundle, cfg.model_config)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv())
    (out / "results.json").write_text(result.to_json() + "\n")
    for name in result.buckets:
        (out / f"buckets_{name}.csv").write_text(result.bucket_csv(name))
    sys.stdout.write(result.to_csv())
    return EXIT_OK


def _bundle_from_arg(text, num_classes=None):
    if text.startswith("synth:"):
        return generate_synthetic(parse_synth(text[len("synth:"):]))
    return load_dataset(text, num_classes)


def cmd_analyze(args) -> int:
    bundle = _bundle_from_arg(args.bundle, args.num_classes)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.sub == "homophily":
        rep = node_homophily(bundle.graph, bundle.labels)
        print(f"node_homophily={rep.graph_mean:.4f}")
        print(f"edge_homophily={rep.edge_ratio:.4f}")
        print(f"excluded_nodes={len(rep.excluded_nodes)}")
        if out:
            with open(out / "homophily.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["node", "homophily"])
                for i, h in enumerate(rep.node_ratios):
                    w.writerow([i, "" if np.isnan(h) else repr(float(h))])
        return EXIT_OK

    split = make_splits(bundle.labels, seed=args.seed)
    if args.mask_class:
        split = mask_classes(bundle, split, args.mask_class)
    sld = shortest_label_distance(bundle.graph, bundle.labels, split.train)
    evaluated = ~split.train & bundle.labels.labeled
    d = sld[evaluated]
    counts = {
        "1": int((d == 1).sum()), "2": int((d == 2).sum()), "3": int((d == 3).sum()),
        ">=4": int((d >= 4).sum()), "unreachable": int((d == UNREACHABLE).sum()),
    }
    for b in SLD_BUCKETS:
        print(f"sld[{b}]={counts[b]}")
    if out:
        with open(out / "sld.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "sld", "train"])
            for i, v in enumerate(sld):
                w.writerow([i, int(v), int(split.train[i])])
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(n=args.n, c=args.c, f=args.f, target_homophily=args.h,
                     mean_degree=args.degree, feature_separation=args.sep, seed=args.seed)
    bundle = generate_synthetic(spec)
    save_dataset(bundle, args.out)
    print(f"nodes={bundle.num_nodes} edges={bundle.graph.num_edges}")
    print(f"edge_homophily={edge_homophily(bundle.graph, bundle.labels):.4f}")
    print(f"node_homophily={node_homophily(bundle.graph, bundle.labels).graph_mean:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcgcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        if model:
            sp.add_argument("--model", choices=("pcgcn", "gcn", "mlp"))

    sp = sub.add_parser("train", help="train one model, write report.json and model.ckpt")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("experiment", help="run an experiment protocol, write CSV and JSON tables")
    sp.add_argument("spec", nargs="?", help="experiment config file (same format as --config)")
    common(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("analyze", help="homophily or shortest-label-distance statistics")
    sp.add_argument("bundle", help="bundle directory or synth:<fields>")
    sp.add_argument("sub", choices=("homophily", "sld"))
    sp.add_argument("--seed", type=int, default=0, help="split seed (sld)")
    sp.add_argument("--mask-class", type=int, action="append", help="drop a class from the train mask (sld)")
    sp.add_argument("--num-classes", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("synth", help="write a synthetic bundle directory")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--c", type=int, default=4)
    sp.add_argument("--f", type=int, default=32)
    sp.add_argument("--h", type=float, default=0.5, help="target homophily")
    sp.add_argument("--degree", type=float, default=10.0)
    sp.add_argument("--sep", type=float, default=2.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def _fail(kind, code, exc):
    msg = " ".join(str(exc).split())
    print(f"pcgcn: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except DivergenceError as exc:
        return _fail("divergence", EXIT_DIVERGED, exc)
    except (DataError, GraphError, OSError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except ValueError as exc:
        # remaining validation errors come from config values reaching constructors
        return _fail("config", EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
