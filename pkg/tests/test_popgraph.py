import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cohortgraph.popgraph import (
    FeatureWeights,
    attach_test_node,
    fit_feature_weights,
    knn_graph,
    mi_estimate,
    pairwise_distances,
    pearson,
    rbf_similarity,
    read_weights_csv,
    severity_encode,
    training_batch,
    weighted_minkowski,
    write_weights_csv,
)


def test_minkowski_examples():
    assert weighted_minkowski([0, 5], [3, 9], [2, 0]) == pytest.approx(6.0)
    assert weighted_minkowski([1, 2, 3], [1, 2, 3], [1, 1, 1]) == 0.0
    assert weighted_minkowski([0, 0], [3, 4], [1, 1]) == pytest.approx(5.0)
    assert weighted_minkowski([0, 0], [3, 4], [1, 1], p=1) == pytest.approx(7.0)
    with pytest.raises(ValueError):
        weighted_minkowski([0, 0], [1, 2, 3], [1, 1])
    with pytest.raises(ValueError):
        weighted_minkowski([0], [1], [1], p=0.5)


def test_pairwise_matches_scalar_definition():
    rng = np.random.default_rng(0)
    a, b, w = rng.normal(size=(5, 4)), rng.normal(size=(6, 4)), rng.random(4)
    for p in (1.0, 2.0, 3.0):
        d = pairwise_distances(a, b, w, p)
        ref = [[weighted_minkowski(x, y, w, p) for y in b] for x in a]
        np.testing.assert_allclose(d, ref, rtol=1e-12)


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (3, 4), elements=finite), arrays(float, 4, elements=st.floats(0.01, 10)))
def test_distance_is_a_metric(pts, w):
    a, b, c = pts
    dab, dba = weighted_minkowski(a, b, w), weighted_minkowski(b, a, w)
    assert dab == pytest.approx(dba)
    assert weighted_minkowski(a, a, w) == 0
    assert dab <= weighted_minkowski(a, c, w) + weighted_minkowski(c, b, w) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_weight_scaling_scales_distance_and_keeps_topology(seed, c):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(15, 3)), rng.random(3) + 0.1
    g1, g2 = knn_graph(x, w, k=4), knn_graph(x, c * w, k=4)
    np.testing.assert_allclose(g2.distances, c * g1.distances, rtol=1e-9)
    assert np.array_equal(g1.neighbors, g2.neighbors)


def test_brute_force_graph_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(9, 30)), 7
        # integer grid forces exact distance ties, which resolve by node id
        x = rng.integers(-3, 4, size=(n, 3)).astype(float)
        g = knn_graph(x, None, k=k)
        for i in range(n):
            d = [(math.dist(x[i], x[j]), j) for j in range(n) if j != i]
            want = [j for _, j in sorted(d)[:k]]
            assert g.neighbors[i].tolist() == want
        assert (g.adjacency().sum(axis=1) == k).all()
        assert not g.adjacency().diagonal().any()
        all_d = [math.dist(x[i], x[j]) for i in range(n) for j in range(n) if i != j]
        assert g.mu == pytest.approx(np.mean(all_d))


def test_graph_examples():
    g = knn_graph(np.array([[0.0], [1.0], [3.0]]), None, k=1)
    assert g.neighbors.ravel().tolist() == [1, 0, 1]
    g8 = knn_graph(np.random.default_rng(0).normal(size=(8, 2)), None, k=7)
    assert g8.adjacency().sum() == 56 and not g8.adjacency().diagonal().any()
    with pytest.raises(ValueError):
        knn_graph(np.zeros((7, 2)), None, k=7)


def test_rbf_examples():
    assert rbf_similarity(0.0, 1.5) == 1.0
    mu = 1.3
    assert rbf_similarity(2 * mu * mu, mu) == pytest.approx(math.exp(-1))
    assert rbf_similarity(math.sqrt(2) * mu, mu, squared=True) == pytest.approx(math.exp(-1))
    s = rbf_similarity(np.linspace(0, 5, 20), 1.0)
    assert np.all(np.diff(s) < 0) and s[0] == 1.0 and s[-1] > 0
    with pytest.raises(ValueError):
        rbf_similarity(1.0, 0.0)


def test_pearson_examples():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    y = np.array([2.0, 1.0, 5.0, 4.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    mx, my = x.mean(), y.mean()
    ref = ((x - mx) * (y - my)).sum() / math.sqrt(((x - mx) ** 2).sum() * ((y - my) ** 2).sum())
    assert abs(pearson(x, y) - ref) < 1e-12
    with pytest.warns(RuntimeWarning):
        assert pearson(np.ones(4), y) == 0.0


def test_severity_encoding():
    assert severity_encode(False, False, False) == 0
    assert severity_encode(True, True, True) == 3
    assert severity_encode(True, False, True) == 2


def test_mi_examples():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=500)
    assert mi_estimate(x, rng.integers(0, 2, 500), seed=1) < 0.05
    y = (x > np.median(x)).astype(int)
    assert mi_estimate(x, y, seed=1) == pytest.approx(math.log(2), abs=0.1)
    with pytest.warns(RuntimeWarning):
        assert mi_estimate(x, np.zeros(500)) == 0.0
    with pytest.raises(ValueError):
        mi_estimate(x[:4], y[:4])


def test_mi_matches_reference_estimator():
    from sklearn.feature_selection import mutual_info_classif

    rng = np.random.default_rng(3)
    x = rng.normal(size=300)
    y = (x + rng.normal(size=300) > 0).astype(int)
    ours = mi_estimate(x, y, reps=1, seed=0)
    ref = mutual_info_classif(x[:, None], y, n_neighbors=3, discrete_features=False, random_state=0)[0]
    assert ours == pytest.approx(ref, abs=0.02)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 50), st.floats(-100, 100))
def test_mi_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=200)
    y = (x + rng.normal(size=200) > 0).astype(int)
    m1 = mi_estimate(x, y, reps=5, seed=0)
    m2 = mi_estimate(a * x + b, y, reps=5, seed=0)
    assert abs(m1 - m2) < 0.05


def test_feature_weights_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        FeatureWeights(np.zeros(3))
    with pytest.raises(ValueError):
        FeatureWeights(np.array([1.0, -1.0]))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 3))
    y = (x[:, 0] > 0).astype(int)
    w = fit_feature_weights(x, y, "pearson-abs", names=("a", "b", "c"))
    assert w.weights.argmax() == 0
    write_weights_csv(tmp_path / "w.csv", w, w.names)
    back = read_weights_csv(tmp_path / "w.csv")
    np.testing.assert_array_equal(back.weights, w.weights)
    assert back.method == "pearson-abs" and back.names == ("a", "b", "c")


def test_attach_test_node_context():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 3))
    g = knn_graph(x, None, k=7)
    test = rng.normal(size=3)
    b = attach_test_node(g, test, context_size=18)
    assert b.n == 19 and b.nodes[0] == -1
    d = np.linalg.norm(x - test, axis=1)
    assert b.nodes[1:].tolist() == np.argsort(d, kind="stable")[:18].tolist()
    assert b.adjacency[0].sum() == 7
    assert b.adjacency[0, 1:8].all()
    assert not b.adjacency[1:, 0].any()
    for a in range(1, 19):
        own = set(g.neighbors[b.nodes[a]].tolist())
        got = {int(b.nodes[j]) for j in np.where(b.adjacency[a])[0]}
        assert got <= own
    with pytest.raises(ValueError):
        attach_test_node(g, np.array([np.nan, 0.0, 0.0]))


def test_training_batch_contains_neighbourhoods():
    g = knn_graph(np.random.default_rng(4).normal(size=(30, 2)), None, k=7)
    b = training_batch(g, [3, 9])
    assert {3, 9} | set(g.neighbors[3]) | set(g.neighbors[9]) == set(b.nodes.tolist())
    pos = {int(v): i for i, v in enumerate(b.nodes)}
    assert b.adjacency[pos[3]].sum() == 7


def test_graph_csv(tmp_path):
    g = knn_graph(np.random.default_rng(5).normal(size=(10, 2)), None, k=3, ids=[f"p{i}" for i in range(10)])
    g.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "src,dst,distance,similarity" and len(lines) == 31
    sims = [float(l.split(",")[3]) for l in lines[1:]]
    assert all(0 < s <= 1 for s in sims)
