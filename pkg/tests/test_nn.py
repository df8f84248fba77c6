import numpy as np
import pytest

from mecoffload import nn
from mecoffload.agents import AgentConfig, MasterAgent
from mecoffload.errors import ContractViolation, TrainingDivergence
from mecoffload.nn import Adam, Mlp, MlpSpec

from oracles import fd_gradient_check, mlp_forward


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 4, 1), hidden_activation="swish")
    assert MlpSpec((7, 64, 32, 3)).n_params == 7 * 64 + 64 + 64 * 32 + 32 + 32 * 3 + 3


def test_forward_matches_plain_numpy():
    rng = np.random.default_rng(0)
    net = Mlp.init(MlpSpec((5, 8, 4, 2), "relu", "tanh"), rng)
    x = rng.normal(size=(6, 5))
    ref = mlp_forward([(W.copy(), b.copy()) for W, b in net.layers], x, "relu", "tanh")
    assert np.array_equal(net.forward(x), ref)
    assert np.array_equal(net.forward(x[0]), ref[0])


def test_forward_rejects_wrong_width():
    net = Mlp.init(MlpSpec((3, 4, 1)), np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        net.forward(np.zeros(4))
    with pytest.raises(ContractViolation):
        Mlp(net.spec, np.zeros(3))


def test_forward_is_pure():
    net = Mlp.init(MlpSpec((3, 4, 1)), np.random.default_rng(0))
    before = net.params.copy()
    x = np.ones((2, 3))
    assert np.array_equal(net.forward(x), net.forward(x))
    assert np.array_equal(net.params, before)


def test_final_layer_scale():
    spec = MlpSpec((7, 64, 32, 3), "relu", "tanh", final_layer_scale=0.01)
    net = Mlp.init(spec, np.random.default_rng(1))
    W, b = net.layers[-1]
    assert np.abs(W).max() <= 0.01 / np.sqrt(32)
    assert np.abs(net.forward(np.random.default_rng(2).uniform(size=(10, 7)))).max() < 0.05


def test_linear_network_closed_form():
    spec = MlpSpec((3, 4, 2), "identity", "identity")
    rng = np.random.default_rng(3)
    net = Mlp.init(spec, rng)
    (W1, b1), (W2, b2) = net.layers
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 2))
    np.testing.assert_allclose(net.forward(x), x @ (W1 @ W2) + (b1 @ W2 + b2), rtol=1e-13)
    grad, gx = net.gradient(x, w)
    g = nn.Mlp(spec, grad)
    (gW1, gb1), (gW2, gb2) = g.layers
    h = x @ W1 + b1
    np.testing.assert_allclose(gW2, h.T @ w, rtol=1e-12)
    np.testing.assert_allclose(gb2, w.sum(0), rtol=1e-12)
    np.testing.assert_allclose(gW1, x.T @ (w @ W2.T), rtol=1e-12)
    np.testing.assert_allclose(gb1, (w @ W2.T).sum(0), rtol=1e-12)
    np.testing.assert_allclose(gx, w @ W2.T @ W1.T, rtol=1e-12)


@pytest.mark.parametrize("widths,hid,out", [
    ((7, 64, 32, 3), "relu", "tanh"),
    ((7, 64, 32, 3), "identity", "tanh"),
    ((4, 6, 5, 1), "tanh", "relu"),
])
def test_small_gradients_match_finite_differences(widths, hid, out):
    rng = np.random.default_rng(4)
    for _ in range(3):
        net = Mlp.init(MlpSpec(widths, hid, out), rng)
        if out == "relu":
            net.layers[-1][1][...] = 1.0  # keep the output unit active
        x = rng.uniform(size=(3, widths[0]))
        w = rng.normal(size=(3, widths[-1]))
        assert fd_gradient_check(net, x, w) <= 1.0


def test_master_gradient_subset():
    rng = np.random.default_rng(5)
    spec = MasterAgent.make_spec(6, AgentConfig())
    assert spec.n_in == 70
    net = Mlp.init(spec, rng)
    x = rng.uniform(size=(2, 70))
    assert fd_gradient_check(net, x, np.ones((2, 1)), n_coords=200, rng=rng) <= 1.0


def test_adam_first_step_is_signed_lr():
    p = np.array([1.0, -2.0, 3.0, 0.5])
    g = np.array([0.3, -5.0, 1e-3, 0.0])
    opt = Adam(lr=0.1)
    opt.step(p, g)
    expect = np.array([1.0, -2.0, 3.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expect, rtol=1e-12)
    assert opt.t == 1


def test_adam_converges_on_quadratic():
    target = np.array([2.0, -1.0, 0.5])
    p = np.zeros(3)
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(p, 2 * (p - target))
    np.testing.assert_allclose(p, target, atol=1e-3)


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingDivergence):
        Adam(1e-3).step(np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(ContractViolation):
        Adam(1e-3).step(np.zeros(2), np.zeros(3))


def test_optimize_step_is_functional():
    p = np.ones(2)
    opt = Adam(0.1)
    q = nn.optimize_step(p, np.ones(2), opt)
    assert np.array_equal(p, np.ones(2))
    assert np.all(q < 1)


def test_functional_wrappers_agree():
    rng = np.random.default_rng(6)
    spec = MlpSpec((3, 5, 2))
    net = Mlp.init(spec, rng)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(nn.forward(net.params, spec, x), net.forward(x))
    g1 = nn.gradient(net.params, spec, x, np.ones((4, 2)))[0]
    assert np.array_equal(g1, net.gradient(x, np.ones((4, 2)))[0])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    net = Mlp.init(MlpSpec((3, 4, 1), "relu", "tanh", 0.5), rng)
    opt = Adam(0.01)
    opt.step(net.params, rng.normal(size=net.params.size))
    path = tmp_path / "ck.npz"
    nn.save_checkpoint(path, {"a": net}, {"a": opt}, {"episode": 4})
    nets, opts, extra = nn.load_checkpoint(path)
    assert extra == {"episode": 4}
    assert nets["a"].spec == net.spec
    assert np.array_equal(nets["a"].params, net.params)
    assert opts["a"].t == 1 and np.array_equal(opts["a"].m, opt.m)
    # both optimizers continue identically
    g = rng.normal(size=net.params.size)
    p1, p2 = net.params.copy(), nets["a"].params.copy()
    opt.step(p1, g)
    opts["a"].step(p2, g)
    assert np.array_equal(p1, p2)
