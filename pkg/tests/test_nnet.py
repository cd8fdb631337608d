import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rebalance import nnet
from rebalance.cwgan_gp import LEARNING_RATES
from rebalance.nnet import (
    ACTIVATIONS,
    OPTIMIZERS,
    MlpSpec,
    MlpState,
    activate,
    backward,
    forward,
    init_mlp,
    input_gradient,
    jvp_param_gradient,
    make_optimizer,
    optimizer_step,
)

from oracles import central_difference, worst_relative_error

TOL = 1e-4


def _net(act, layer_norm, widths=(3, 5, 4, 3, 1), seed=0, out="linear"):
    spec = MlpSpec(widths, act, out, layer_norm, seed)
    state = init_mlp(spec)
    rng = np.random.default_rng(seed + 100)
    # random gains/shifts so layer norm is not at its identity point
    for g in state.gains:
        g[...] = rng.uniform(0.5, 1.5, g.shape)
    for s in state.shifts:
        s[...] = rng.normal(scale=0.3, size=s.shape)
    for b in state.biases:
        b[...] = rng.normal(scale=0.3, size=b.shape)
    return spec, state, rng


def test_init_shapes_and_determinism():
    spec = MlpSpec((2, 8, 8, 8, 1), layer_norm=True, seed=4)
    s = init_mlp(spec)
    assert [w.shape for w in s.weights] == [(2, 8), (8, 8), (8, 8), (8, 1)]
    assert [b.shape for b in s.biases] == [(8,), (8,), (8,), (1,)]
    assert all(np.all(g == 1) for g in s.gains) and len(s.gains) == 3
    assert all(np.all(v == 0) for v in s.shifts)
    again = init_mlp(spec)
    assert all(np.array_equal(a, b) for a, b in zip(s.arrays(), again.arrays()))
    for w, fan_in in zip(s.weights, (2, 8, 8, 8)):
        assert np.all(np.abs(w) <= 1 / np.sqrt(fan_in))


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 1), activation="swish")
    with pytest.raises(ValueError):
        MlpSpec((3,))


def test_forward_examples():
    one = MlpSpec((1, 1), output_activation="relu")
    st_ = MlpState([np.eye(1)], [np.zeros(1)])
    assert forward(st_, one, np.array([[-3.0]]))[0][0, 0] == 0.0
    assert activate("sigmoid", np.zeros((1, 1)))[0, 0] == 0.5
    np.testing.assert_allclose(activate("softmax", np.zeros((1, 3))), [[1 / 3] * 3])
    assert activate("hard_sigmoid", np.array([[10.0, -10.0, 0.0]])).tolist() == [[1.0, 0.0, 0.5]]
    np.testing.assert_allclose(activate("leaky_relu", np.array([[-2.0]])), [[-0.02]])


def test_forward_rejects_bad_input():
    spec = MlpSpec((2, 3, 1))
    s = init_mlp(spec)
    with pytest.raises(ValueError, match="non-finite"):
        forward(s, spec, np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError, match="width"):
        forward(s, spec, np.zeros((1, 3)))


def test_layer_norm_normalises_hidden_preactivations():
    spec = MlpSpec((4, 6, 1), "relu", layer_norm=True)
    s = init_mlp(spec)
    x = np.random.default_rng(0).normal(size=(5, 4))
    _, cache = forward(s, spec, x)
    z = cache.z[0]
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(z.var(axis=1), 1, atol=1e-3)


@pytest.mark.parametrize("layer_norm", [False, True])
@pytest.mark.parametrize("act", ACTIVATIONS)
def test_backward_matches_finite_differences(act, layer_norm):
    spec, s, rng = _net(act, layer_norm, widths=(3, 5, 4, 2), out="tanh")
    x = rng.normal(size=(4, 3))
    adj = rng.normal(size=(4, 2))

    def loss():
        return float(np.sum(forward(s, spec, x)[0] * adj))

    out, cache = forward(s, spec, x)
    grads, gin = backward(s, spec, cache, adj)
    assert worst_relative_error(grads.arrays(), central_difference(loss, s.arrays())) < TOL
    xg = x.copy()

    def loss_x():
        return float(np.sum(forward(s, spec, xg)[0] * adj))

    assert worst_relative_error([gin], central_difference(loss_x, [xg])) < TOL


@pytest.mark.parametrize("layer_norm", [False, True])
@pytest.mark.parametrize("act", ACTIVATIONS)
def test_input_gradient_matches_finite_differences(act, layer_norm):
    spec, s, rng = _net(act, layer_norm)
    x = rng.normal(size=(3, 3))
    g = input_gradient(s, spec, x)
    for i in range(x.shape[0]):
        row = x[i:i + 1].copy()
        num = central_difference(lambda: float(forward(s, spec, row)[0][0, 0]), [row])
        assert worst_relative_error([g[i:i + 1]], num) < TOL


@pytest.mark.parametrize("layer_norm", [False, True])
@pytest.mark.parametrize("act", ACTIVATIONS)
def test_directional_derivative_gradient(act, layer_norm):
    spec, s, rng = _net(act, layer_norm)
    x = rng.normal(size=(4, 3))
    v = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 1))
    adj = rng.normal(size=(4, 1))

    def objective():
        # sum_i w_i (grad_x f(x_i) . v_i) + sum_i adj_i f(x_i)
        out, cache = forward(s, spec, x)
        _, gx = backward(s, spec, cache, np.ones_like(out), params=False)
        return float(np.sum(w[:, 0] * np.sum(gx * v, axis=1)) + np.sum(adj * out))

    tangent, grads = jvp_param_gradient(s, spec, x, v, weights=w, output_adjoint=adj)
    gx = input_gradient(s, spec, x)
    np.testing.assert_allclose(tangent[:, 0], np.sum(gx * v, axis=1), rtol=1e-10, atol=1e-12)
    assert worst_relative_error(grads.arrays(), central_difference(objective, s.arrays())) < TOL


def test_backward_special_cases():
    spec = MlpSpec((3, 2))
    s = init_mlp(spec)
    x = np.array([[1.0, 2.0, 3.0]])
    _, cache = forward(s, spec, x)
    grads, _ = backward(s, spec, cache, np.zeros((1, 2)))
    assert all(np.all(a == 0) for a in grads.arrays())
    g = np.array([[0.5, -2.0]])
    grads, _ = backward(s, spec, cache, g)
    np.testing.assert_allclose(grads.weights[0], np.outer(x[0], g[0]))
    with pytest.raises(ValueError, match="shape"):
        backward(s, spec, cache, np.zeros((2, 2)))


def test_input_gradient_closed_forms():
    spec = MlpSpec((2, 1))
    lin = MlpState([np.array([[3.0], [4.0]])], [np.zeros(1)])
    x = np.random.default_rng(0).normal(size=(6, 2))
    g = input_gradient(lin, spec, x)
    np.testing.assert_allclose(g, np.tile([3.0, 4.0], (6, 1)))
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 5.0)
    deep = MlpSpec((2, 4, 4, 4, 1), "tanh")
    zero = init_mlp(deep).zeros_like()
    assert np.all(input_gradient(zero, deep, x) == 0)
    with pytest.raises(ValueError, match="width 1"):
        input_gradient(init_mlp(MlpSpec((2, 2))), MlpSpec((2, 2)), x)


def _scalar_state(value):
    return MlpState([np.array([[value]])], [np.zeros(1)])


def test_sgd_and_adam_single_step():
    s = _scalar_state(1.0)
    optimizer_step(make_optimizer("sgd", 0.1, s), s, _scalar_state(2.0))
    assert s.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)
    s = _scalar_state(1.0)
    opt = make_optimizer("adam", 0.001, s)
    optimizer_step(opt, s, _scalar_state(2.0))
    assert s.weights[0][0, 0] == pytest.approx(0.999, abs=1e-6)
    assert opt.step_counter == 1


@pytest.mark.parametrize("kind", OPTIMIZERS)
def test_zero_gradient_leaves_parameters(kind):
    s = _scalar_state(1.5)
    opt = make_optimizer(kind, 0.01, s)
    optimizer_step(opt, s, _scalar_state(0.0))
    assert s.weights[0][0, 0] == 1.5


def test_optimizer_rejects_mismatched_gradients():
    s = _scalar_state(1.0)
    opt = make_optimizer("adam", 0.01, s)
    with pytest.raises(ValueError, match="structure"):
        optimizer_step(opt, s, MlpState([np.zeros((2, 1))], [np.zeros(1)]))


def _regression_toy():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(64, 2))
    y = (np.sin(2 * x[:, 0]) + x[:, 1] ** 2)[:, None]
    return x, y


def _mse_curve(kind, lr, steps=50):
    x, y = _regression_toy()
    spec = MlpSpec((2, 16, 16, 16, 1), "tanh", seed=1)
    s = init_mlp(spec)
    opt = make_optimizer(kind, lr, s)
    losses = []
    for _ in range(steps + 1):
        out, cache = forward(s, spec, x)
        r = out - y
        losses.append(float(np.mean(r * r)))
        grads, _ = backward(s, spec, cache, 2 * r / len(x))
        optimizer_step(opt, s, grads)
    return losses


@pytest.mark.parametrize("kind", OPTIMIZERS)
def test_each_optimizer_decreases_loss_for_some_menu_rate(kind):
    ok = []
    for lr in LEARNING_RATES:
        curve = _mse_curve(kind, lr)
        ok.append(all(b < a for a, b in zip(curve, curve[1:])))
    assert any(ok), f"{kind}: no learning rate decreased the loss at every step"


def test_training_is_deterministic():
    assert _mse_curve("nadam", 0.005, 10) == _mse_curve("nadam", 0.005, 10)


def test_state_round_trip():
    spec = MlpSpec((3, 4, 1), layer_norm=True, seed=2)
    s = init_mlp(spec)
    back = nnet.state_from_dict(nnet.state_to_dict(s))
    assert all(np.array_equal(a, b) for a, b in zip(s.arrays(), back.arrays()))


@settings(max_examples=30, deadline=None)
@given(act=st.sampled_from(ACTIVATIONS), seed=st.integers(0, 10**6))
def test_forward_outputs_are_finite(act, seed):
    spec = MlpSpec((3, 8, 8, 8, 2), act, "sigmoid", seed=seed)
    x = np.random.default_rng(seed).normal(scale=50, size=(10, 3))
    out, _ = forward(init_mlp(spec), spec, x)
    assert np.all(np.isfinite(out)) and np.all((out >= 0) & (out <= 1))


def test_parameters_share_one_buffer():
    spec, state, _ = _net("tanh", True)
    assert state.packed() is state.flat
    assert state.flat.size == sum(a.size for a in state.arrays())
    state.weights[1][0, 0] = 7.0
    assert 7.0 in state.flat
    twin = state.copy()
    twin.flat[:] = 0.0
    assert state.weights[1][0, 0] == 7.0


def test_rebound_entry_falls_back_to_per_array_updates():
    spec, state, rng = _net("relu", False)
    x = rng.normal(size=(4, 3))
    out, cache = forward(state, spec, x)
    grads, _ = backward(state, spec, cache, np.ones_like(out))
    reference = state.copy()
    state.biases[0] = state.biases[0].copy()  # no longer a view
    assert state.packed() is None
    optimizer_step(make_optimizer("sgd", 0.1, state), state, grads)
    optimizer_step(make_optimizer("sgd", 0.1, reference), reference, grads)
    for a, b in zip(state.arrays(), reference.arrays()):
        np.testing.assert_array_equal(a, b)
    assert reference.packed() is not None


@pytest.mark.parametrize("layer_norm", [False, True])
def test_gradient_buffers_match_fresh_results(layer_norm):
    spec, state, rng = _net("softplus", layer_norm)
    x, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    out, cache = forward(state, spec, x)
    fresh, gx = backward(state, spec, cache, np.ones_like(out))
    buf = state.zeros_like()
    buf.flat[:] = np.nan  # every entry must be overwritten
    reused, none = backward(state, spec, cache, np.ones_like(out), out=buf, inputs=False)
    assert reused is buf and none is None
    np.testing.assert_array_equal(reused.flat, fresh.flat)
    _, jfresh = jvp_param_gradient(state, spec, x, v)
    buf.flat[:] = np.nan
    _, jreused = jvp_param_gradient(state, spec, x, v, out=buf)
    np.testing.assert_array_equal(jreused.flat, jfresh.flat)
    with pytest.raises(ValueError, match="buffer"):
        backward(state, spec, cache, np.ones_like(out), out=init_mlp(MlpSpec((3, 2, 1))))
