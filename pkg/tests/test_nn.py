import numpy as np
import pytest

from nvc.nn import (
    AdamState,
    CorruptCheckpointError,
    CheckpointVersionError,
    ModelKindMismatchError,
    Model,
    Parameter,
    ShapeError,
    activation,
    activation_forward,
    adam_step,
    clip_gradients,
    finite_difference_check,
    layer_forward_backward,
    load_checkpoint,
    save_checkpoint,
)
from nvc.nn import checkpoint
from nvc.nn.core import add_conv, add_dense, add_gru
from nvc.nn.gradcheck import check_function_gradient
from nvc.nn.layers import causal_conv1d_forward, gru_sequence_forward


def _probe_loss(y, seed=1):
    """Random linear functional of y and its gradient."""
    c = np.random.default_rng(seed).standard_normal(y.shape)
    return float(np.sum(c * y)), c


class ToyModel(Model):
    kind = "encoder"


def _param_check(model, forward, samples=40):
    def loss_and_grad():
        model.zero_grad()
        return forward()
    return finite_difference_check(loss_and_grad, model.params, samples=samples, epsilon=1e-5)


# -- activations ------------------------------------------------------------------

def test_relu_values():
    assert activation("relu", np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_softmax_constant_row_is_uniform():
    y = activation("softmax_rows", np.full((3, 5), 7.0))
    np.testing.assert_allclose(y, 0.2, atol=1e-15)


def test_softmax_rows_stochastic():
    x = np.random.default_rng(0).standard_normal((10, 7)) * 30
    y = activation("softmax_rows", x)
    assert np.all(np.abs(y.sum(axis=1) - 1.0) < 1e-12)


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "softmax_rows"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    c = rng.standard_normal(x.shape)

    def f(v):
        return float(np.sum(c * activation(kind, v)))

    def g(v):
        return activation_forward(kind, v)[1](c)

    assert check_function_gradient(f, g, x) < 1e-6


def test_sigmoid_extreme_inputs_finite():
    y = activation("sigmoid", np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(y))
    assert y.tolist() == [0.0, 0.5, 1.0]


# -- layers ---------------------------------------------------------------------------

def test_dense_identity():
    x = np.random.default_rng(0).standard_normal((4, 3))
    y, _ = layer_forward_backward("dense", x, {"W": np.eye(3), "b": np.zeros(3)})
    np.testing.assert_array_equal(y, x)


def test_dense_shape_error_names_layer():
    with pytest.raises(ShapeError, match="dense"):
        layer_forward_backward("dense", np.zeros((2, 3)), {"W": np.zeros((4, 2)), "b": np.zeros(2)})


def test_gru_zero_weights_halves_state():
    H, I = 5, 3
    h = np.random.default_rng(1).standard_normal((2, H))
    params = {"Wx": np.zeros((I, 3 * H)), "Wh": np.zeros((H, 3 * H)),
              "bx": np.zeros(3 * H), "bh": np.zeros(3 * H)}
    h_new, _ = layer_forward_backward("gru_cell", (np.ones((2, I)), h), params)
    np.testing.assert_allclose(h_new, 0.5 * h, atol=1e-15)


def test_gru_shape_error():
    params = {"Wx": np.zeros((3, 15)), "Wh": np.zeros((5, 15)), "bx": np.zeros(15), "bh": np.zeros(15)}
    with pytest.raises(ShapeError, match="gru_cell"):
        layer_forward_backward("gru_cell", (np.zeros((2, 4)), np.zeros((2, 5))), params)


def test_dense_gradient():
    rng = np.random.default_rng(0)
    m = ToyModel({})
    add_dense(m, rng, "d", 4, 3)
    m.params["d.b"].value[:] = rng.standard_normal(3)
    x = rng.standard_normal((5, 4))

    def fwd():
        y, back = layer_forward_backward("dense", x, {"W": m["d.W"], "b": m["d.b"]})
        loss, c = _probe_loss(y)
        m.accumulate("d.", back(c)[1])
        return loss

    assert _param_check(m, fwd) < 1e-4


def test_gru_cell_gradient_params_and_inputs():
    rng = np.random.default_rng(2)
    m = ToyModel({})
    add_gru(m, rng, "g", 3, 4)
    for k in ("g.bx", "g.bh"):
        m.params[k].value[:] = 0.3 * rng.standard_normal(12)
    m.add("x", rng.standard_normal((2, 3)))
    m.add("h", rng.standard_normal((2, 4)))

    def fwd():
        h, back = layer_forward_backward("gru_cell", (m["x"], m["h"]), {k: m["g." + k] for k in ("Wx", "Wh", "bx", "bh")})
        loss, c = _probe_loss(h)
        (dx, dh), grads = back(c)
        m.accumulate("g.", grads)
        m.params["x"].grad += dx
        m.params["h"].grad += dh
        return loss

    assert _param_check(m, fwd, samples=60) < 1e-4


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_sequence_gradient(reverse):
    rng = np.random.default_rng(4)
    m = ToyModel({})
    add_gru(m, rng, "g", 3, 4)
    m.add("x", rng.standard_normal((2, 6, 3)))
    m.add("h0", 0.1 * rng.standard_normal((2, 4)))

    def fwd():
        hs, back = gru_sequence_forward(m["x"], m["h0"], m["g.Wx"], m["g.Wh"], m["g.bx"], m["g.bh"], reverse=reverse)
        loss, c = _probe_loss(hs)
        (dx, dh0), grads = back(c)
        m.accumulate("g.", grads)
        m.params["x"].grad += dx
        m.params["h0"].grad += dh0
        return loss

    assert _param_check(m, fwd, samples=60) < 1e-4


def test_gru_sequence_matches_cell_loop():
    rng = np.random.default_rng(5)
    m = ToyModel({})
    add_gru(m, rng, "g", 3, 4)
    p = {k: m["g." + k] for k in ("Wx", "Wh", "bx", "bh")}
    x = rng.standard_normal((2, 5, 3))
    hs, _ = gru_sequence_forward(x, np.zeros((2, 4)), p["Wx"], p["Wh"], p["bx"], p["bh"])
    h = np.zeros((2, 4))
    for t in range(5):
        h, _ = layer_forward_backward("gru_cell", (x[:, t], h), p)
        np.testing.assert_allclose(hs[:, t], h, atol=1e-14)


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_causal_conv_gradient(dilation):
    rng = np.random.default_rng(6)
    m = ToyModel({})
    add_conv(m, rng, "c", 2, 3, 4)
    m.add("x", rng.standard_normal((2, 9, 3)))

    def fwd():
        y, back = causal_conv1d_forward(m["x"], m["c.W"], m["c.b"], dilation)
        loss, c = _probe_loss(y)
        dx, grads = back(c)
        m.accumulate("c.", grads)
        m.params["x"].grad += dx
        return loss

    assert _param_check(m, fwd, samples=60) < 1e-4


@pytest.mark.parametrize("dilation", [1, 3])
def test_causal_conv_is_causal(dilation):
    rng = np.random.default_rng(7)
    W, b = rng.standard_normal((3, 2, 2)), rng.standard_normal(2)
    x = rng.standard_normal((1, 12, 2))
    y0 = causal_conv1d_forward(x, W, b, dilation)[0]
    for t in range(11):
        x2 = x.copy()
        x2[0, t + 1] += 10.0
        y1 = causal_conv1d_forward(x2, W, b, dilation)[0]
        np.testing.assert_array_equal(y1[0, :t + 1], y0[0, :t + 1])
        assert not np.allclose(y1[0, t + 1], y0[0, t + 1])


def test_causal_conv_matches_direct_sum():
    rng = np.random.default_rng(8)
    K, C, F, d = 3, 2, 2, 2
    W, b = rng.standard_normal((K, C, F)), rng.standard_normal(F)
    x = rng.standard_normal((1, 10, C))
    y = causal_conv1d_forward(x, W, b, d)[0]
    for t in range(10):
        expect = b.copy()
        for k in range(K):
            src = t - (K - 1 - k) * d
            if src >= 0:
                expect += x[0, src] @ W[k]
        np.testing.assert_allclose(y[0, t], expect, atol=1e-12)


def test_embedding_lookup_and_gradient():
    table = np.arange(12.0).reshape(4, 3)
    y, back = layer_forward_backward("embedding_lookup", [2, 0, 2], {"table": table})
    np.testing.assert_array_equal(y, table[[2, 0, 2]])
    g = back(np.ones((3, 3)))[1]["table"]
    np.testing.assert_array_equal(g[:, 0], [1, 0, 2, 0])


def test_embedding_out_of_range():
    with pytest.raises(ShapeError, match="embedding_lookup"):
        layer_forward_backward("embedding_lookup", [4], {"table": np.zeros((4, 2))})


# -- optimizer --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": Parameter("w", np.array([1.0, -2.0]))}
    st = AdamState()
    adam_step(p, st)
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])
    assert st.step == 1


@pytest.mark.parametrize("g", [1e-3, 1.0, 250.0, -7.0])
def test_adam_first_step_magnitude_is_lr(g):
    p = {"w": Parameter("w", np.array([0.0]))}
    p["w"].grad[:] = g
    st = AdamState(lr=0.01)
    adam_step(p, st)
    # closed form: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    assert p["w"].value[0] == pytest.approx(-0.01 * np.sign(g) * abs(g) / (abs(g) + 1e-8), rel=1e-12)


def test_adam_frozen_parameter_untouched():
    p = {"w": Parameter("w", np.array([3.0]), frozen=True)}
    p["w"].grad[:] = 5.0
    adam_step(p, AdamState())
    assert p["w"].value[0] == 3.0


def test_clip_gradients_global_norm():
    p = {"a": Parameter("a", np.zeros(2)), "b": Parameter("b", np.zeros(1))}
    p["a"].grad[:] = [3.0, 4.0]
    p["b"].grad[:] = [12.0]
    norm = clip_gradients(p, 5.0)
    assert norm == pytest.approx(13.0)
    total = np.sqrt(sum(np.sum(q.grad ** 2) for q in p.values()))
    assert total == pytest.approx(5.0)


def test_quadratic_gradcheck():
    p = {"t": Parameter("t", np.random.default_rng(0).standard_normal(10))}

    def lg():
        p["t"].grad[:] = 2 * p["t"].value
        return float(np.sum(p["t"].value ** 2))

    assert finite_difference_check(lg, p, samples=10, epsilon=1e-5) < 1e-8


# -- checkpoints ------------------------------------------------------------------

class _CkptVocoder(Model):
    kind = "vocoder"

    def __init__(self, config):
        super().__init__(config)
        rng = np.random.default_rng(config.get("seed", 0))
        add_dense(self, rng, "encoder.proj", 3, 2)
        add_dense(self, rng, "head", 2, 2)


@pytest.fixture
def scratch_kind(monkeypatch):
    # borrow the vocoder kind without clobbering the real model for other modules
    monkeypatch.setitem(checkpoint._REGISTRY, "vocoder", _CkptVocoder)


def test_checkpoint_round_trip_bit_exact(tmp_path, scratch_kind):
    m = _CkptVocoder({"seed": 3})
    st = AdamState(lr=0.002)
    for p in m.params.values():
        p.grad[:] = 1.0
    adam_step(m.params, st)
    save_checkpoint(m, tmp_path / "c.nvc", step=17, adam=st)
    m2, step, st2 = load_checkpoint(tmp_path / "c.nvc")
    assert step == 17 and st2.step == 1 and st2.lr == 0.002
    for k in m.params:
        assert m.params[k].value.tobytes() == m2.params[k].value.tobytes()
        assert st.m[k].tobytes() == st2.m[k].tobytes()
        assert st.v[k].tobytes() == st2.v[k].tobytes()


def test_checkpoint_freeze_patterns(tmp_path, scratch_kind):
    save_checkpoint(_CkptVocoder({}), tmp_path / "c.nvc")
    m, _, _ = load_checkpoint(tmp_path / "c.nvc", freeze_patterns=["encoder."])
    assert {k for k, p in m.params.items() if p.frozen} == {"encoder.proj.W", "encoder.proj.b"}


def test_checkpoint_kind_mismatch(tmp_path, scratch_kind):
    save_checkpoint(_CkptVocoder({}), tmp_path / "c.nvc")
    with pytest.raises(ModelKindMismatchError, match="model kind mismatch"):
        load_checkpoint(tmp_path / "c.nvc", expected_kind="encoder")


def test_checkpoint_version_and_corruption(tmp_path, scratch_kind):
    path = tmp_path / "c.nvc"
    save_checkpoint(_CkptVocoder({}), path)
    raw = bytearray(path.read_bytes())
    bad_version = raw.copy()
    bad_version[4] = 9
    (tmp_path / "v.nvc").write_bytes(bad_version)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.nvc")
    (tmp_path / "t.nvc").write_bytes(raw[:-10])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "t.nvc")
    (tmp_path / "m.nvc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.nvc")
