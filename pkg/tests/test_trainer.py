import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nbf.dynamics import DynamicsModel, benchmark, dubins_car, linear_system, polynomial_system
from nbf.network import Network, forward_batch
from nbf.noise import DiagonalGaussian
from nbf.relaxation import CROWN_IBP, Hyperrectangle, crown_batch, ibp_batch, linear_to_interval_batch
from nbf.sets import BoxSet, Difference, EmptySet, circ
from nbf.trainer import (NonFiniteLoss, TrainConfig, _to_torch, evaluate_loss, pointwise_loss, robust_loss,
                         sample_batch, sample_set, torch_bounds, train)

from helpers import random_net


# -- sampling ----------------------------------------------------------------

def test_singleton_initial_set_is_repeated():
    b = sample_batch(dubins_car(), 7, np.random.default_rng(0))
    assert b.X0.shape == (7, 3) and np.all(b.X0 == [-0.95, 0.0, 0.0])


@pytest.mark.parametrize("name", ["linear", "polynomial2d", "dubins"])
def test_batch_membership(name):
    dyn = benchmark(name)
    b = sample_batch(dyn, 500, np.random.default_rng(1))
    for pts, s in ((b.X0, dyn.initial_set), (b.Xs, dyn.safe_set), (b.Xu, dyn.unsafe_set)):
        assert pts.shape == (500, dyn.state_dim) and np.all(s.contains(pts))
    assert np.all(~dyn.safe_set.contains(b.Xu)) and np.all(dyn.in_state_space(b.Xu))


def test_uniform_sampling_mean():
    dyn = linear_system()
    x = sample_set(BoxSet(dyn.state_space), dyn.state_space, 100_000, np.random.default_rng(2))
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)


def test_degenerate_set_is_rejected():
    X = Hyperrectangle([-1.0, -1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        sample_set(Difference(circ(0.0, 0.0, 1.0), circ(0.0, 0.0, 1.0 - 1e-6)), X, 10, np.random.default_rng(0))
    assert sample_set(EmptySet(2), X, 10, np.random.default_rng(0)).shape == (0, 2)


# -- configuration -----------------------------------------------------------

def test_default_config_values():
    c = TrainConfig()
    assert (c.m, c.l, c.eps, c.H, c.epochs, c.iters_per_epoch) == (250, 500, 1e-5, 10, 150, 400)
    assert (c.kappa0, c.kappa_decay, c.learning_rate, c.hidden) == (1.0, 0.97, 1e-3, (128, 128, 128))


def test_kappa_schedule_is_exact():
    c = TrainConfig()
    for e in range(0, 150, 7):
        assert c.kappa(e) == 0.97 ** e


@pytest.mark.parametrize("bad", [dict(m=0), dict(eps=-1.0), dict(kappa0=1.5), dict(kappa_decay=0.0),
                                 dict(hidden=(0,)), dict(margin_unsafe=-0.1)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- torch relaxation route vs numpy route -------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_torch_bounds_match_numpy_crown_ibp(seed):
    rng = np.random.default_rng(seed)
    net = random_net(2, (16, 16), seed)
    lo = rng.uniform(-1, 0, (20, 2))
    hi = lo + rng.uniform(0, 0.5, (20, 2))
    params = _to_torch(net, requires_grad=False)
    acts = [s.activation for s in net.layers]
    tl, tu = torch_bounds(params, acts, torch.as_tensor(lo), torch.as_tensor(hi))
    nl, nu = linear_to_interval_batch(*crown_batch(net, lo, hi, CROWN_IBP), lo, hi)
    assert np.allclose(tl.numpy(), nl[:, 0], rtol=0, atol=1e-12)
    assert np.allclose(tu.numpy(), nu[:, 0], rtol=0, atol=1e-12)


def _setup(name="polynomial2d", seed=0, m=12, l=6, widths=(8, 8)):
    dyn = benchmark(name)
    rng = np.random.default_rng(seed)
    net = random_net(dyn.state_dim, widths, seed)
    return dyn, net, sample_batch(dyn, m, rng), dyn.noise.sample(l, rng)


@pytest.mark.parametrize("name", ["linear", "polynomial2d", "dubins"])
@pytest.mark.parametrize("kappa", [0.0, 0.4, 1.0])
def test_torch_loss_matches_numpy_loss(name, kappa):
    dyn, net, batch, v = _setup(name)
    val, _ = robust_loss(net, dyn, batch, v, kappa, 0.01, 10, (0.02, 0.1))
    ref = evaluate_loss(net, dyn, batch, v, kappa, 0.01, 10, (0.02, 0.1))
    assert val == pytest.approx(ref["loss"], abs=1e-12)


def test_eps_zero_equals_pointwise_loss():
    dyn, net, batch, v = _setup()
    val, _ = robust_loss(net, dyn, batch, v, 0.3, 0.0, 10)
    assert val == pytest.approx(pointwise_loss(net, dyn, batch, v, 0.3, 10), abs=1e-12)


def test_kappa_one_is_gamma_plus_beta_h():
    dyn, net, batch, v = _setup()
    parts = evaluate_loss(net, dyn, batch, v, 1.0, 0.01, 10)
    val, _ = robust_loss(net, dyn, batch, v, 1.0, 0.01, 10)
    assert val == pytest.approx(parts["gamma_m"] + 10 * parts["beta_m"], abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 0.1), st.floats(0.0, 1.0))
def test_robust_loss_dominates_pointwise(seed, eps, kappa):
    dyn, net, batch, v = _setup(seed=seed % 1000)
    val, _ = robust_loss(net, dyn, batch, v, kappa, eps, 10)
    assert val >= pointwise_loss(net, dyn, batch, v, kappa, 10) - 1e-12


def _flat(net):
    return np.concatenate([a.ravel() for a in net.weights + net.biases])


def _set_flat(net, theta):
    out, k = net.copy(), 0
    for group in (out.weights, out.biases):
        for arr in group:
            arr[...] = theta[k:k + arr.size].reshape(arr.shape)
            k += arr.size
    return out


def fd_check(seed, name="polynomial2d", h=1e-6):
    """Max relative error of the robust-loss gradient vs central differences."""
    dyn, net, batch, v = _setup(name, seed, m=8, l=4, widths=(8,))
    kappa, eps = 0.5, 0.01
    _, g = robust_loss(net, dyn, batch, v, kappa, eps, 10)
    analytic = np.concatenate([a.ravel() for a in g.weights + g.biases])
    theta = _flat(net)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        numeric[i] = (evaluate_loss(_set_flat(net, tp), dyn, batch, v, kappa, eps, 10)["loss"]
                      - evaluate_loss(_set_flat(net, tm), dyn, batch, v, kappa, eps, 10)["loss"]) / (2 * h)
    # a kink inside [theta - h, theta + h] shows up as a mismatch of one-sided slopes
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    assert fd_check(seed) < 1e-3


def test_training_is_deterministic():
    dyn = linear_system()
    cfg = TrainConfig(m=8, l=4, epochs=1, iters_per_epoch=1, hidden=(8,), seed=5, eps=0.01)
    a, _ = train(dyn, cfg)
    b, _ = train(dyn, cfg)
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(x, y)


def test_metrics_history():
    dyn = linear_system()
    cfg = TrainConfig(m=8, l=4, epochs=3, iters_per_epoch=2, hidden=(8,), seed=0)
    seen = []
    _, hist = train(dyn, cfg, on_epoch=lambda r, n: seen.append((r.epoch, isinstance(n, Network))))
    assert [h.epoch for h in hist] == [0, 1, 2] and seen == [(0, True), (1, True), (2, True)]
    assert [h.kappa for h in hist] == [1.0, 0.97, 0.97 ** 2]
    assert hist[1].learning_rate == pytest.approx(1e-3 * 0.97)


def test_violation_only_task_drives_loss_to_zero():
    # kappa = 0 and no unsafe set: only B >= 0 on X is asked for
    X = Hyperrectangle([-1.0, -1.0], [1.0, 1.0])
    dyn = DynamicsModel("sanity", 0.5 * np.eye(2), np.zeros(2), [], X, circ(0.0, 0.0, 0.5), BoxSet(X),
                        DiagonalGaussian(np.zeros(2), [0.01, 0.01]), unsafe_set=EmptySet(2))
    init = random_net(2, (8,), 0)
    init.biases[-1][:] -= 1.0
    cfg = TrainConfig(m=32, l=2, epochs=50, iters_per_epoch=4, kappa0=0.0, hidden=(8,), learning_rate=1e-2,
                      lr_decay=1.0, seed=0)
    _, hist = train(dyn, cfg, init=init)
    losses = np.array([h.loss for h in hist])
    assert losses[0] > 0.1
    assert losses[-5:].mean() < 0.05 * losses[0]
    assert np.polyfit(np.arange(50), losses, 1)[0] < 0


def test_non_finite_loss_aborts():
    dyn = linear_system()
    init = random_net(2, (4,), 0)
    init.weights[0][:] = 1e200
    init.weights[1][:] = 1e200
    with pytest.raises(NonFiniteLoss):
        train(dyn, TrainConfig(m=4, l=2, epochs=1, iters_per_epoch=1, hidden=(4,)), init=init)
