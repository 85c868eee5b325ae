import numpy as np
import pytest

from cohortgraph import tensor as T
from cohortgraph.fusion import (
    GATHead,
    HeadConfig,
    JointFusion,
    MLPHead,
    SAGEHead,
    decide,
    knn_classify,
    read_predictions_csv,
    wknn_classify,
    write_predictions_csv,
)
from cohortgraph.popgraph import attach_test_node, knn_graph
from cohortgraph.tensor import DimensionError, Tensor, no_grad

DIMS = {"image": 64, "radiomics": 4, "metadata": 14}


def _inputs(rng, n=5):
    return {k: rng.normal(size=(n, d)) for k, d in DIMS.items()}


def test_concat_width_and_blocks():
    rng = np.random.default_rng(0)
    fusion = JointFusion(DIMS, rng, width=32, dtype=np.float64)
    assert fusion.out_features == 96
    x = _inputs(rng)
    with no_grad():
        z = fusion(x).data
    assert z.shape == (5, 96)
    for b, (name, layer) in enumerate(zip(fusion.names, fusion.proj)):
        block = x[name] @ layer.weight.data
        np.testing.assert_array_equal(z[:, 32 * b:32 * (b + 1)], np.where(block > 0, block, 0.01 * block))


def test_zero_inputs_fuse_to_zero():
    fusion = JointFusion(DIMS, np.random.default_rng(0), dtype=np.float64)
    with no_grad():
        z = fusion({k: np.zeros((2, d)) for k, d in DIMS.items()})
    assert not z.data.any()


def test_average_and_maxpool_modes():
    dims = {"a": 1, "b": 1}
    for mode, want in (("average", 2.0), ("maxpool", 3.0)):
        f = JointFusion(dims, np.random.default_rng(0), width=1, mode=mode, dtype=np.float64)
        f.proj[0].weight.data[:] = 1.0
        f.proj[1].weight.data[:] = 3.0
        with no_grad():
            assert f({"a": np.ones((1, 1)), "b": np.ones((1, 1))}).item() == want
    with pytest.raises(ValueError):
        JointFusion(dims, np.random.default_rng(0), mode="sum")
    with pytest.raises(DimensionError):
        JointFusion(dims, np.random.default_rng(0))({"a": np.ones((1, 1))})


@pytest.mark.parametrize("head_cls", [GATHead, SAGEHead, MLPHead])
def test_heads_give_probabilities_and_are_deterministic_in_eval(head_cls):
    rng = np.random.default_rng(1)
    head = head_cls(96, HeadConfig(n_labels=3), np.random.default_rng(2), dtype=np.float64)
    head.eval()
    z = Tensor(rng.normal(size=(19, 96)))
    adj = knn_graph(rng.normal(size=(19, 2)), None, k=7).adjacency()
    with no_grad():
        a = T.sigmoid(head(z, adj)[0]).data
        b = T.sigmoid(head(z, adj)[0]).data
    assert a.shape == (19, 3)
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_array_equal(a, b)


def test_gat_head_locality():
    rng = np.random.default_rng(3)
    train = rng.normal(size=(30, 2))
    g = knn_graph(train, None, k=7)
    batch = attach_test_node(g, rng.normal(size=2), context_size=18)
    head = GATHead(8, HeadConfig(), np.random.default_rng(4), dtype=np.float64).eval()
    z = rng.normal(size=(batch.n, 8))

    def predict(feats):
        with no_grad():
            logits, trace = head(Tensor(feats), batch.adjacency)
        return logits.data[0, 0], trace

    base, trace = predict(z)
    reach = trace.two_hop()[0]
    far = [j for j in range(batch.n) if reach[j] == 0]
    near = int(np.argmax(np.where(np.arange(batch.n) == 0, 0, reach)))
    assert far, "context should contain nodes outside the two-hop reach"
    moved = z.copy()
    moved[far] += 5.0
    assert predict(moved)[0] == pytest.approx(base, abs=1e-12)
    moved = z.copy()
    moved[near] += 5.0
    assert abs(predict(moved)[0] - base) > 1e-6


def test_wknn_examples():
    w = np.ones(1)
    assert wknn_classify([[0.0]], [[1.0], [5.0]], [1, 0], w, k=1, mu=1.0)[0, 0] == 1.0
    assert wknn_classify([[0.0]], [[-1.0], [1.0]], [0, 1], w, k=2, mu=1.0)[0, 0] == pytest.approx(0.5)
    # closer neighbour dominates
    p = wknn_classify([[0.0]], [[0.5], [3.0]], [1, 0], w, k=2, mu=1.0)[0, 0]
    assert p == pytest.approx(np.exp(-0.25) / (np.exp(-0.25) + np.exp(-1.5)))


def test_knn_examples():
    train = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    assert knn_classify([[2.0, 0.0]], train, [0, 1, 0], k=2)[0, 0] == 1.0
    assert knn_classify([[1.0, 0.0]], train, [0, 1, 0], k=2)[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        knn_classify([[0.0, 0.0]], train, [0, 1, 0], k=4)


def test_decision_rule_and_csv(tmp_path):
    assert decide(0.5, 0.5) == False  # noqa: E712
    assert decide(0.51, 0.5) == True  # noqa: E712
    path = tmp_path / "p.csv"
    write_predictions_csv(path, ["a", "b"], [1, 0], [0.9, 0.2], 0.4)
    back = read_predictions_csv(path)
    assert back["ids"] == ["a", "b"] and back["threshold"] == 0.4
    assert back["probabilities"].tolist() == [0.9, 0.2] and back["decisions"].tolist() == [1, 0]
