"""Convert a LINQS-style ``<name>.content`` / ``<name>.cites`` pair into a bundle directory.

    python tools/convert_linqs.py /path/to/cora fixtures/cora

``.content`` rows are ``id f1 ... fF label``; ``.cites`` rows are ``cited citing``.
Node ids follow the row order of ``.content``; class ids follow sorted label names.
Citations that mention an id missing from ``.content`` are skipped.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from pcgcn.data import DatasetBundle, save_dataset
from pcgcn.graph import LabelSet, build_graph


def convert(prefix: Path, name: str):
    ids, feats, names = [], [], []
    for line in (prefix.parent / f"{name}.content").read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        ids.append(parts[0])
        feats.append([float(v) for v in parts[1:-1]])
        names.append(parts[-1])
    index = {k: i for i, k in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])
    edges, skipped = [], 0
    for line in (prefix.parent / f"{name}.cites").read_text().splitlines():
        parts = line.split()
        if len(parts) != 2:
            continue
        if parts[0] in index and parts[1] in index:
            edges.append((index[parts[0]], index[parts[1]]))
        else:
            skipped += 1
    graph = build_graph(np.array(edges), len(ids))
    bundle = DatasetBundle(graph, np.array(feats), LabelSet(labels, len(classes)), name)
    return bundle, classes, skipped


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="path prefix, e.g. raw/cora for raw/cora.content")
    ap.add_argument("out")
    args = ap.parse_args(argv)
    src = Path(args.source)
    bundle, classes, skipped = convert(src, src.name)
    save_dataset(bundle, args.out)
    print(f"{bundle.name}: {bundle.num_nodes} nodes, {bundle.graph.num_edges} edges, "
          f"{bundle.num_features} features, classes={classes}, skipped_citations={skipped}, "
          f"self_loops_dropped={bundle.graph.dropped_self_loops}")


if __name__ == "__main__":
    sys.exit(main())
