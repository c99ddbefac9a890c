import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from dpt.numcore import AdamState, ConfigError, MlpParams, adam_step, init_mlp
from dpt.ssl_classifier import (
    LinearProbe,
    MsnConfig,
    NumericError,
    ProbeConfig,
    ema_update,
    extract_features,
    init_msn,
    make_batch_views,
    make_views,
    msn_loss_and_grads,
    msn_objective,
    predict,
    prototype_assignment,
    target_assignments,
    train_msn,
    train_probe,
)

from oracles import central_diff, rel_err


def identity_encoder(d):
    return MlpParams([np.eye(d)], [np.zeros(d)], [])


def test_views_without_corruption(rng):
    cfg = MsnConfig(mask_ratio=0.0, noise_scale=0.0, H=3)
    x = np.array([1.0, -2.0, 0.5])
    anchors, target = make_views(x, cfg, rng)
    assert np.array_equal(anchors, np.tile(x, (3, 1))) and np.array_equal(target, x)


def test_views_mask_count(rng):
    cfg = MsnConfig(mask_ratio=0.5, noise_scale=0.0, H=5)
    anchors, target = make_views(np.array([1.0, 2.0, 3.0, 4.0]), cfg, rng)
    assert np.all((anchors == 0).sum(axis=1) == 2)
    assert np.all(target != 0)


def test_views_deterministic():
    cfg = MsnConfig()
    x = np.array([0.3, 1.1])
    a = make_views(x, cfg, np.random.default_rng(5))
    b = make_views(x, cfg, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_assignment_symmetric_pair():
    p = prototype_assignment(np.array([1.0, 1.0]), np.array([[1.0, 0.0], [0.0, 1.0]]), 0.1)
    assert np.allclose(p, [0.5, 0.5])


def test_assignment_direct_evaluation():
    p = prototype_assignment(np.array([2.0, 0.0]), np.array([[3.0, 0.0], [0.0, 1.0]]), 1.0)
    e = math.e
    assert np.allclose(p, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_assignment_sums_to_one(seed, tau):
    r = np.random.default_rng(seed)
    p = prototype_assignment(r.normal(size=(4, 3)), r.normal(size=(6, 3)), tau)
    assert np.allclose(p.sum(axis=1), 1.0) and np.all(p >= 0)


def test_assignment_zero_norm():
    with pytest.raises(NumericError):
        prototype_assignment(np.zeros(2), np.eye(2), 0.1)
    with pytest.raises(NumericError):
        prototype_assignment(np.ones(2), np.array([[1.0, 0.0], [0.0, 0.0]]), 0.1)


def test_msn_zero_cross_entropy():
    cfg = MsnConfig(H=1, lam=0.0, tau=1e-3)
    q = np.eye(3)
    views = 5.0 * np.eye(3)
    loss, _, _ = msn_objective(identity_encoder(3), q, views, np.eye(3), cfg)
    assert loss == pytest.approx(0.0, abs=1e-300)


def test_msn_uniform_assignments_give_log_p():
    P = 5
    cfg = MsnConfig(H=2, lam=0.0)
    q = np.tile([1.0, 2.0], (P, 1))  # identical prototypes -> uniform anchor assignments
    views = np.random.default_rng(0).normal(size=(6, 2))
    loss, _, _ = msn_objective(identity_encoder(2), q, views, np.full((3, P), 1 / P), cfg)
    assert loss == pytest.approx(math.log(P), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_msn_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = MsnConfig(H=2, lam=0.7, tau=0.5, tau_target=0.2, hidden=[4], feature_dim=3, num_prototypes=4)
    state = init_msn(2, 3, cfg, rng)
    anchors, targets_x = make_batch_views(rng.normal(size=(3, 2)), cfg, rng)
    targets = target_assignments(state, targets_x, cfg)
    _, grads, g_q = msn_objective(state.anchor, state.prototypes, anchors, targets, cfg)

    def f():
        return msn_objective(state.anchor, state.prototypes, anchors, targets, cfg)[0]

    # small h: cosine normalisation of short feature vectors is strongly curved
    fd = central_diff(f, state.anchor.arrays() + [state.prototypes], h=1e-6)
    assert rel_err(grads + [g_q], fd) < 1e-5


def test_target_encoder_untouched_by_gradients():
    cfg = MsnConfig(ema=1.0, epochs=2, batch_size=32, hidden=[8], feature_dim=4)
    X = np.random.default_rng(1).normal(size=(64, 2))
    ref = init_msn(2, 2, cfg, np.random.default_rng(9))
    state, _ = train_msn(X, 2, cfg, np.random.default_rng(9))
    for a, b in zip(state.target.arrays(), ref.target.arrays()):
        assert np.array_equal(a, b)
    assert not all(np.array_equal(a, b) for a, b in zip(state.anchor.arrays(), ref.anchor.arrays()))


def test_msn_loss_decreases_on_frozen_batch():
    rng = np.random.default_rng(3)
    cfg = MsnConfig(hidden=[16], feature_dim=8)
    state = init_msn(2, 4, cfg, rng)
    anchors, tx = make_batch_views(rng.normal(size=(32, 2)) * 3, cfg, rng)
    targets = target_assignments(state, tx, cfg)
    opt = AdamState(lr=1e-3)
    losses = []
    for _ in range(5):
        loss, g, gq = msn_objective(state.anchor, state.prototypes, anchors, targets, cfg)
        losses.append(loss)
        adam_step(opt, state.anchor.arrays() + [state.prototypes], g + [gq])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_msn_loss_and_grads_runs(rng):
    cfg = MsnConfig(hidden=[8], feature_dim=4)
    state = init_msn(2, 2, cfg, rng)
    loss, grads, gq = msn_loss_and_grads(state, rng.normal(size=(10, 2)), cfg, rng)
    assert np.isfinite(loss) and gq.shape == state.prototypes.shape


def test_ema_cases(rng):
    a = init_mlp([2, 3, 1], "tanh", rng)
    b = init_mlp([2, 3, 1], "tanh", rng)
    t = a.copy()
    ema_update(t, b, 1.0)
    assert all(np.array_equal(x, y) for x, y in zip(t.arrays(), a.arrays()))
    ema_update(t, b, 0.0)
    assert all(np.array_equal(x, y) for x, y in zip(t.arrays(), b.arrays()))
    p = MlpParams([np.full((1, 1), 0.2)], [np.zeros(1)], [])
    ema_update(p, MlpParams([np.full((1, 1), 0.4)], [np.zeros(1)], []), 0.5)
    assert p.weights[0][0, 0] == pytest.approx(0.3)
    with pytest.raises(ConfigError):
        ema_update(p, p, 1.5)


def test_msn_config_validation():
    with pytest.raises(ConfigError):
        MsnConfig(tau=0)
    with pytest.raises(ConfigError):
        MsnConfig(lam=-1)
    with pytest.raises(ConfigError):
        MsnConfig(num_prototypes=2).prototypes_for(3)
    assert MsnConfig().prototypes_for(8) == 32


def test_extract_features_rowwise(rng):
    cfg = MsnConfig(hidden=[8], feature_dim=5)
    state = init_msn(2, 2, cfg, rng)
    X = rng.normal(size=(20, 2))
    F = extract_features(state, X)
    assert F.shape == (20, 5)
    assert np.array_equal(F, extract_features(state, X))
    perm = rng.permutation(20)
    assert np.allclose(extract_features(state, X[perm]), F[perm], rtol=0, atol=1e-14)


def test_probe_separable_two_classes(rng):
    F = np.concatenate([rng.normal(size=(20, 2)) + [4, 0], rng.normal(size=(20, 2)) - [4, 0]])
    y = np.repeat([0, 1], 20)
    probe = train_probe(F, y, 2)
    assert np.mean(predict(probe, F)[0] == y) == 1.0


def test_probe_regularisation_monotone(rng):
    F = rng.normal(size=(30, 3))
    y = rng.integers(0, 3, size=30)
    norms = [np.linalg.norm(train_probe(F, y, 3, ProbeConfig(l2=l2)).weight) for l2 in (0.01, 0.1, 1.0, 10.0)]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_probe_single_class_rejected(rng):
    with pytest.raises(ConfigError):
        train_probe(rng.normal(size=(5, 2)), np.zeros(5, int), 3)


def test_probe_matches_independent_optimizer():
    """Oracle: the same objective minimised by scipy's L-BFGS, written independently."""
    r = np.random.default_rng(4)
    centers = np.array([[0.0, 2.0], [2.0, -1.0], [-2.0, -1.0]])
    F = np.concatenate([c + 0.9 * r.normal(size=(25, 2)) for c in centers])
    y = np.repeat(np.arange(3), 25)
    l2 = 0.05
    probe = train_probe(F, y, 3, ProbeConfig(l2=l2))

    def objective(theta):
        W, b = theta[:6].reshape(3, 2), theta[6:]
        z = F @ W.T + b
        lse = np.log(np.sum(np.exp(z - z.max(1, keepdims=True)), 1)) + z.max(1)
        return np.mean(lse - z[np.arange(len(y)), y]) + 0.5 * l2 * np.sum(W ** 2)

    res = minimize(objective, np.zeros(9), method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-14})
    W, b = res.x[:6].reshape(3, 2), res.x[6:]
    grid = r.uniform(-4, 4, size=(500, 2))
    oracle = np.argmax(grid @ W.T + b, axis=1)
    assert np.mean(predict(probe, grid)[0] == oracle) >= 0.998
    assert np.allclose(probe.weight, W, atol=1e-4) and np.allclose(probe.bias - probe.bias.mean(), b - b.mean(), atol=1e-4)


def test_probe_deterministic_and_permutation_invariant(rng):
    F = rng.normal(size=(40, 3))
    y = rng.integers(0, 4, size=40)
    a = train_probe(F, y, 4)
    b = train_probe(F, y, 4)
    assert np.array_equal(a.weight, b.weight)
    perm = rng.permutation(40)
    c = train_probe(F[perm], y[perm], 4)
    assert np.allclose(a.weight, c.weight, atol=1e-9)


def test_predict_tie_break_and_normalisation():
    probe = LinearProbe(np.zeros((3, 2)), np.zeros(3), 0.0)
    labels, probs = predict(probe, np.ones((4, 2)))
    assert np.array_equal(labels, [0, 0, 0, 0]) and np.allclose(probs, 1 / 3)
    probe = LinearProbe(np.zeros((3, 1)), np.array([2.0, 1.0, 1.0]), 0.0)
    labels, probs = predict(probe, np.zeros((1, 1)))
    assert labels[0] == 0 and probs.sum() == pytest.approx(1.0)
    probe = LinearProbe(np.zeros((3, 1)), np.array([1.0, 2.0, 2.0]), 0.0)
    assert predict(probe, np.zeros((1, 1)))[0][0] == 1
