import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_fd, rel_err
from scrlab.autodiff import (Adam, Mlp, MlpSpec, ParamStore, Tensor, adam_step, backward, concat, load_params,
                             save_params, stack, where)


def make_mlp(widths, acts, seed=0):
    params = ParamStore()
    net = Mlp(MlpSpec(widths, acts), params, "net", np.random.default_rng(seed))
    return net, params


# -- forward ------------------------------------------------------------------

def test_identity_layer_passes_input_through():
    params = ParamStore()
    net = Mlp(MlpSpec((3, 3), ("identity",)), params, "id", init="zeros")
    params["id.0.weight"].data = np.eye(3)
    x = np.array([[0.5, -2.0, 3.0]])
    np.testing.assert_array_equal(net(x).data, x)


def test_relu_kills_negative_inputs():
    params = ParamStore()
    net = Mlp(MlpSpec((4, 4), ("relu",)), params, "r", init="zeros")
    params["r.0.weight"].data = np.eye(4)
    out = net(-np.abs(np.random.default_rng(1).normal(size=(2, 4))) - 0.1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_tanh_mlp_matches_scalar_recomputation():
    net, params = make_mlp((3, 4, 2), ("tanh", "tanh"), seed=0)
    x = [0.3, -0.7, 1.1]
    W0, b0 = params["net.0.weight"].data, params["net.0.bias"].data
    W1, b1 = params["net.1.weight"].data, params["net.1.bias"].data
    hidden = []
    for j in range(4):
        s = b0[j]
        for i in range(3):
            s += x[i] * W0[i, j]
        hidden.append(math.tanh(s))
    expected = []
    for k in range(2):
        s = b1[k]
        for j in range(4):
            s += hidden[j] * W1[j, k]
        expected.append(math.tanh(s))
    np.testing.assert_allclose(net(np.array([x])).data[0], expected, rtol=0, atol=1e-14)


def test_width_mismatch_names_layer():
    net, _ = make_mlp((3, 4, 2), ("tanh", "identity"))
    with pytest.raises(ValueError, match="net layer 0"):
        net(np.zeros((1, 5)))


@pytest.mark.parametrize("widths,acts", [((3,), ()), ((3, 0, 2), ("relu", "relu")), ((3, 2), ("gelu",)),
                                         ((3, 2, 1), ("relu",))])
def test_mlpspec_validation(widths, acts):
    with pytest.raises(ValueError):
        MlpSpec(widths, acts)


def test_init_is_uniform_within_fan_in_bound():
    _, params = make_mlp((25, 40), ("identity",), seed=3)
    w = params["net.0.weight"].data
    assert np.abs(w).max() <= 1 / 5 and np.abs(w).max() > 0.19


# -- backward -----------------------------------------------------------------

def test_linear_gradient_is_input():
    params = ParamStore()
    w = params.add("w", np.array([1.0, -2.0, 0.5]))
    x = np.array([3.0, 4.0, -1.0])
    grads = backward((w * x).sum(), params)
    np.testing.assert_array_equal(grads["w"], x)


def test_relu_subgradient_at_zero_is_zero():
    params = ParamStore()
    x = params.add("x", np.zeros(5))
    np.testing.assert_array_equal(backward(x.relu().sum(), params)["x"], 0.0)


def test_unreachable_parameter_gets_zero_gradient():
    params = ParamStore()
    a = params.add("a", np.ones(3))
    params.add("b", np.ones((2, 2)))
    grads = backward((a * a).sum(), params)
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    params = ParamStore()
    a = params.add("a", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(a * 2, params)


def test_duplicate_parameter_names_rejected():
    params = ParamStore()
    params.add("a", np.ones(1))
    with pytest.raises(KeyError):
        params.add("a", np.ones(1))


def test_random_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(123)
    smooth = ("tanh", "sigmoid", "softplus", "identity")
    worst = 0.0
    for trial in range(100):
        widths = tuple(int(w) for w in rng.integers(2, 6, size=4))
        acts = tuple(rng.choice(smooth, size=3))
        net, params = make_mlp(widths, acts, seed=trial)
        x = rng.normal(size=(3, widths[0]))
        target = rng.normal(size=(3, widths[-1]))

        def loss_of(values, name):
            params[name].data = values
            return float(((net(x).data - target) ** 2).mean())

        grads = backward(((net(x) - target) ** 2).mean(), params)
        for name in params.names():
            base = params[name].data.copy()
            fd = central_fd(lambda v: loss_of(v, name), base, h=1e-5)
            params[name].data = base
            worst = max(worst, rel_err(grads[name], fd).max())
    assert worst < 1e-4


UNARY = ["exp", "log", "sqrt", "abs", "tanh", "sigmoid", "relu", "softplus"]


@pytest.mark.parametrize("op", UNARY)
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    for _ in range(100):
        x = rng.uniform(0.2, 2.0, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2))
        if op in ("log", "sqrt"):
            x = np.abs(x)
        params = ParamStore()
        t = params.add("x", x)
        w = rng.normal(size=x.shape)
        g = backward((getattr(t, op)() * w).sum(), params)["x"]
        fd = central_fd(lambda v: float((getattr(Tensor(v), op)().data * w).sum()), x)
        assert rel_err(g, fd).max() < 1e-4


def test_broadcast_matmul_and_shape_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        w = rng.normal(size=(2, 5, 3))

        def f(A, B):
            y = (A @ B).swapaxes(-1, -2) * Tensor(w)
            y = concat([y[:, :2], y[:, 2:].flip(2)], axis=1)
            y = stack([y, y.pad([(0, 0), (0, 0), (1, 1)], "reflect")[..., 1:-1]], axis=0)
            return (y.reshape(-1) ** 2).sum() / (B.exp().sum() + 1.0)

        params = ParamStore()
        A = params.add("a", a)
        B = params.add("b", b)
        g = backward(f(A, B), params)
        fa = central_fd(lambda v: f(Tensor(v), Tensor(b)).item(), a)
        fb = central_fd(lambda v: f(Tensor(a), Tensor(v)).item(), b)
        assert rel_err(g["a"], fa).max() < 1e-4
        assert rel_err(g["b"], fb).max() < 1e-4


@pytest.mark.parametrize("mode", ["reflect", "edge", "constant"])
def test_pad_gradient(mode):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(2, 6, 9))
    params = ParamStore()
    t = params.add("x", x)
    pw = [(0, 0), (1, 1), (2, 2)]
    g = backward((t.pad(pw, mode) * w).sum(), params)["x"]
    fd = central_fd(lambda v: float((np.pad(v, pw, mode=mode) * w).sum()), x)
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_where_routes_gradient():
    params = ParamStore()
    a = params.add("a", np.arange(4.0))
    b = params.add("b", -np.arange(4.0))
    cond = np.array([True, False, True, False])
    g = backward((where(cond, a, b) * 2.0).sum(), params)
    np.testing.assert_array_equal(g["a"], 2.0 * cond)
    np.testing.assert_array_equal(g["b"], 2.0 * ~cond)


def test_composition_gradient_matches_finite_differences():
    """f_L(x) + h_L(f_V(x)) through the tape equals the composed function's derivative."""
    rng = np.random.default_rng(11)
    params = ParamStore()
    f_L = Mlp(MlpSpec((2, 6, 1), ("tanh", "identity")), params, "f_L", rng)
    f_V = Mlp(MlpSpec((2, 6, 1), ("tanh", "identity")), params, "f_V", rng)
    h_L = Mlp(MlpSpec((1, 6, 1), ("tanh", "identity")), params, "h_L", rng)
    x = rng.uniform(-1, 1, size=(8, 2))
    y = rng.normal(size=(8, 1))

    def loss():
        return ((f_L(x) + h_L(f_V(x)) - y) ** 2).mean()

    grads = backward(loss(), params)
    for name in params.names():
        base = params[name].data.copy()

        def f(v):
            params[name].data = v
            return loss().item()

        fd = central_fd(f, base)
        params[name].data = base
        assert rel_err(grads[name], fd).max() < 1e-4, name


def test_forward_backward_deterministic():
    outs = []
    for _ in range(2):
        net, params = make_mlp((4, 8, 3), ("tanh", "sigmoid"), seed=5)
        x = np.random.default_rng(9).normal(size=(6, 4))
        g = backward(net(x).sum(), params)
        outs.append((net(x).data.tobytes(), b"".join(g[k].tobytes() for k in sorted(g))))
    assert outs[0] == outs[1]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_finite_inputs_give_finite_outputs(x):
    net, params = make_mlp((4, 5, 2), ("softplus", "sigmoid"), seed=0)
    out = net(x)
    assert np.all(np.isfinite(out.data))
    g = backward(out.sum(), params)
    assert all(np.all(np.isfinite(v)) for v in g.values())


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    m, v = np.array([0.5, 0.5]), np.array([0.25, 0.25])
    new, m2, v2, t = adam_step(p, np.zeros(2), m, v, 3, lr=0.1)
    np.testing.assert_array_equal(new, p - 0.1 * (m2 / (1 - 0.9**4)) / (np.sqrt(v2 / (1 - 0.999**4)) + 1e-8))
    np.testing.assert_allclose(m2, 0.45)
    np.testing.assert_allclose(v2, 0.25 * 0.999)
    assert t == 4
    new0, m0, v0, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 0, lr=0.1)
    np.testing.assert_array_equal(new0, p)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.01, 250.0])
    new, *_ = adam_step(np.zeros(3), g, np.zeros(3), np.zeros(3), 0, lr=0.05, eps=0.0)
    np.testing.assert_allclose(new, -0.05 * np.sign(g), rtol=1e-12)


def test_adam_two_steps_match_hand_trace():
    params = ParamStore()
    params.add("p", np.array([1.0]))
    opt = Adam(lr=0.1)
    opt.step(params, {"p": np.array([0.5])})
    assert params["p"].data[0] == pytest.approx(0.900000002, abs=1e-15)
    opt.step(params, {"p": np.array([-0.25])})
    assert params["p"].data[0] == pytest.approx(0.8733662987078463, abs=1e-15)
    assert opt.state["p"][2] == 2


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    _, params = make_mlp((5, 7, 3), ("tanh", "identity"), seed=2)
    params["net.0.bias"].data[0] = 1 / 3
    path = tmp_path / "ckpt.json"
    save_params(params, path)
    loaded = load_params(path)
    assert list(loaded) == params.names()
    for name, t in params.items():
        assert loaded[name].shape == t.shape
        assert loaded[name].tobytes() == t.data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other", "params": []}')
    with pytest.raises(ValueError):
        load_params(path)
