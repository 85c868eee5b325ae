import numpy as np
import pytest

from cohortgraph import tensor as T
from cohortgraph.nn import Adam, BatchNorm, Dropout, Linear, load_checkpoint, save_checkpoint
from cohortgraph.segnet import SegNet, SegNetConfig
from cohortgraph.tensor import Tensor


def test_checkpoint_round_trip(tmp_path):
    net = SegNet(SegNetConfig(base_filters=2, depth=2, input_size=(8, 8)), np.random.default_rng(0))
    state = net.state_dict()
    save_checkpoint(tmp_path / "ck.bin", state)
    loaded = load_checkpoint(tmp_path / "ck.bin")
    assert set(loaded) == set(state)
    for k in state:
        assert np.array_equal(loaded[k], state[k].astype(np.float32))
    raw = (tmp_path / "ck.bin").read_bytes()
    header = raw[: raw.index(b"\n")]
    assert b'"f32le"' in header
    other = SegNet(SegNetConfig(base_filters=2, depth=2, input_size=(8, 8)), np.random.default_rng(1))
    other.load_state_dict(loaded)
    for k, v in other.state_dict().items():
        assert np.array_equal(v, state[k])


def test_load_state_dict_reports_missing():
    lin = Linear(2, 3, np.random.default_rng(0))
    with pytest.raises(KeyError):
        lin.load_state_dict({"weight": np.zeros((2, 3))})


def test_adam_minimises_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([w], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        T.reduce_sum(T.square(w)).backward()
        opt.step()
    assert np.abs(w.data).max() < 1e-2


def test_adam_first_step_is_lr_sized():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam([w], lr=5e-4, weight_decay=0.0)
    T.reduce_sum(T.scale(w, 7.0)).backward()
    opt.step()
    np.testing.assert_allclose(w.data, [1.0 - 5e-4, -1.0 - 5e-4], rtol=1e-6)


def test_batchnorm_single_row_uses_running_stats():
    bn = BatchNorm(3, dtype=np.float64)
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = bn(x)
    np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5))
    assert np.array_equal(bn._buffers["running_mean"], np.zeros(3))


def test_dropout_identity_in_eval():
    d = Dropout(0.5).eval()
    x = Tensor(np.ones(10))
    assert d(x) is x
    with pytest.raises(ValueError):
        Dropout(1.2)


def test_train_eval_propagates():
    net = SegNet(SegNetConfig(base_filters=2, depth=1, input_size=(4, 4)), np.random.default_rng(0))
    net.eval()
    assert not net.down[0].bn1.training
    net.train()
    assert net.up[0].bn2.training
