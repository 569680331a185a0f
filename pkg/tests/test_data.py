import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcgcn.data import (
    DataError,
    DatasetBundle,
    SplitSpec,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    make_budget_split,
    make_splits,
    mask_classes,
    save_dataset,
)
from pcgcn.graph import LabelSet, build_graph, edge_homophily, node_homophily


def small_bundle():
    g = build_graph([(0, 1), (1, 2), (2, 3)], 4)
    x = np.array([[0.1, 1 / 3], [2.5e-300, -1.0], [np.pi, 0.0], [1e17, -7.25]])
    return DatasetBundle(g, x, LabelSet(np.array([0, 1, -1, 1]), 2), "small")


def write(tmp_path, edges="0 1\n", features="1,2\n3,4\n", labels="0\n1\n"):
    (tmp_path / "graph.edges").write_text(edges)
    (tmp_path / "features.csv").write_text(features)
    (tmp_path / "labels.txt").write_text(labels)
    return tmp_path


def test_round_trip_bit_exact(tmp_path):
    b = small_bundle()
    save_dataset(b, tmp_path)
    b2 = load_dataset(tmp_path, num_classes=2)
    assert np.array_equal(b.features, b2.features)
    assert np.array_equal(b.labels.labels, b2.labels.labels)
    assert np.array_equal(b.graph.col_indices, b2.graph.col_indices)
    assert np.array_equal(b.graph.row_offsets, b2.graph.row_offsets)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, seed):
    b = generate_synthetic(SynthSpec(n=30, c=3, f=4, mean_degree=3, seed=seed % 1000))
    b = DatasetBundle(b.graph, b.features * np.random.default_rng(seed).lognormal(0, 20, b.features.shape),
                      b.labels, b.name)
    d = tmp_path_factory.mktemp("rt")
    save_dataset(b, d)
    b2 = load_dataset(d, num_classes=3)
    assert np.array_equal(b.features, b2.features)
    assert np.array_equal(b.graph.to_dense(), b2.graph.to_dense())


@pytest.mark.parametrize("kw, match", [
    ({"features": "1,2\n3\n"}, r"features.csv:2: ragged"),
    ({"labels": "0\nx\n"}, r"labels.txt:2: not an integer"),
    ({"edges": "0 1\n0 9\n"}, r"graph.edges:2: node id out of range"),
    ({"edges": "0 1 2\n"}, r"graph.edges:1: expected"),
    ({"features": "1,2\n"}, r"1 feature rows but 2 labels"),
    ({"features": "1,2\n3,nan\n"}, r"non-finite|nan|finite"),
])
def test_load_errors_name_file_and_line(tmp_path, kw, match):
    write(tmp_path, **kw)
    with pytest.raises(DataError, match=match):
        load_dataset(tmp_path)


def test_load_missing_file(tmp_path):
    (tmp_path / "labels.txt").write_text("0\n")
    with pytest.raises(DataError, match="missing file"):
        load_dataset(tmp_path)


def test_declared_class_count_checked(tmp_path):
    write(tmp_path, labels="0\n3\n")
    with pytest.raises(DataError, match="labels.txt:2"):
        load_dataset(tmp_path, num_classes=2)


def test_split_fractions_per_class():
    labels = LabelSet(np.repeat(np.arange(4), [50, 37, 81, 12]), 4)
    for seed in range(10):
        s = make_splits(labels, seed=seed)
        assert not (s.train & s.val).any() and not (s.train & s.test).any()
        assert (s.train | s.val | s.test).sum() == 180
        for c in range(4):
            cls = labels.labels == c
            assert abs(s.train[cls].sum() - 0.48 * cls.sum()) <= 1


def test_split_is_pure_function():
    labels = LabelSet(np.arange(100) % 5, 5)
    a, b = make_splits(labels, seed=3), make_splits(labels, seed=3)
    assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("train", "val", "test"))
    assert not np.array_equal(a.train, make_splits(labels, seed=4).train)


def test_split_unlabeled_never_assigned():
    labels = LabelSet(np.array([0, 1] * 10 + [-1] * 5), 2)
    s = make_splits(labels, seed=0)
    assert not (s.train | s.val | s.test)[-5:].any()


def test_split_json_round_trip():
    labels = LabelSet(np.arange(40) % 4, 4)
    s = make_splits(labels, seed=2)
    s2 = SplitSpec.from_json(s.to_json(), 40)
    assert np.array_equal(s.test, s2.test) and s2.seed == 2 and s2.ratios == s.ratios


def test_bad_ratios_and_overlap():
    labels = LabelSet(np.arange(10) % 2, 2)
    with pytest.raises(DataError):
        make_splits(labels, ratios=(0.5, 0.5, 0.5))
    m = np.ones(10, bool)
    with pytest.raises(DataError):
        SplitSpec(m, m, ~m)


def test_budget_split():
    labels = LabelSet(np.arange(300) % 3, 3)
    s = make_budget_split(labels, 5, seed=1)
    assert [int(s.train[labels.labels == c].sum()) for c in range(3)] == [5, 5, 5]
    rest = 300 - 15
    assert s.val.sum() == int(rest * 0.32 / 0.52) and s.val.sum() + s.test.sum() == rest


def test_mask_classes():
    b = generate_synthetic(SynthSpec(n=100, c=4, seed=0))
    s = make_splits(b.labels, seed=0)
    m = mask_classes(b, s, [0])
    assert not (m.train & (b.labels.labels == 0)).any()
    assert np.array_equal(m.test, s.test) and np.array_equal(m.val, s.val)
    same = mask_classes(b, s, [])
    assert np.array_equal(same.train, s.train)
    with pytest.raises(DataError):
        mask_classes(b, s, range(4))


def test_synthetic_extremes():
    one = generate_synthetic(SynthSpec(n=300, c=3, target_homophily=1.0, seed=1))
    zero = generate_synthetic(SynthSpec(n=300, c=3, target_homophily=0.0, seed=1))
    assert edge_homophily(one.graph, one.labels) == 1.0
    assert edge_homophily(zero.graph, zero.labels) == 0.0


def test_synthetic_quarter_homophily_example():
    b = generate_synthetic(SynthSpec(n=1000, c=4, target_homophily=0.25, mean_degree=10, seed=0))
    h = node_homophily(b.graph, b.labels).graph_mean
    assert 0.22 <= h <= 0.28
    # frozen measurement for this seed
    assert h == pytest.approx(0.24529134563534286, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(500, 1500), st.integers(2, 6), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_synthetic_hits_target_homophily(n, c, h, seed):
    b = generate_synthetic(SynthSpec(n=n, c=c, f=4, target_homophily=h, mean_degree=10, seed=seed))
    assert abs(node_homophily(b.graph, b.labels).graph_mean - h) <= 0.03


def test_synthetic_structure():
    b = generate_synthetic(SynthSpec(n=2000, c=5, f=16, mean_degree=10, feature_separation=4.0, seed=3))
    assert np.bincount(b.labels.labels).tolist() == [400] * 5
    assert abs(b.graph.degrees.mean() - 10) < 0.5
    means = np.stack([b.features[b.labels.labels == k].mean(0) for k in range(5)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(5, 1)]
    assert np.all(np.abs(d - 4.0) < 0.4)


@pytest.mark.parametrize("kw", [{"mean_degree": 100}, {"c": 1}, {"target_homophily": 1.5}, {"feature_separation": -1}])
def test_synthetic_spec_errors(kw):
    base = dict(n=100)
    base.update(kw)
    with pytest.raises(DataError):
        SynthSpec(**base)


def test_row_normalized():
    b = small_bundle()
    x = DatasetBundle(b.graph, np.abs(b.features[:, :1]) + 1, b.labels).row_normalized().features
    np.testing.assert_allclose(x.sum(1), 1.0)
