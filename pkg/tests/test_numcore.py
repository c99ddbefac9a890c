import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpt.numcore import (
    AdamState,
    ConfigError,
    EmbeddingTable,
    MlpParams,
    ShapeError,
    TrainingError,
    adam_step,
    decode_array,
    encode_array,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_from_dict,
    mlp_to_dict,
    save_checkpoint,
    time_embedding,
)

from oracles import central_diff, rel_err


def test_zero_weights_give_bias(rng):
    p = init_mlp([3, 5, 2], "tanh", rng)
    for w in p.weights:
        w[:] = 0
    p.biases[-1][:] = [0.7, -1.5]
    out, _ = mlp_forward(p, rng.normal(size=3))
    assert np.array_equal(out, [0.7, -1.5])


def test_identity_layer():
    p = MlpParams([np.eye(3)], [np.zeros(3)], [])
    x = np.array([1.0, -2.0, 0.5])
    out, _ = mlp_forward(p, x)
    assert np.array_equal(out, x)


def test_dimension_mismatch(rng):
    p = init_mlp([2, 4, 3], "tanh", rng)
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros(3))
    _, cache = mlp_forward(p, np.zeros(2))
    with pytest.raises(ShapeError):
        mlp_backward(p, cache, np.zeros(4))


def test_bad_chain_rejected():
    with pytest.raises(ShapeError):
        MlpParams([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)], ["tanh"])


@pytest.mark.parametrize("act", ["tanh", "softplus"])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(act, seed):
    rng = np.random.default_rng(seed)
    p = init_mlp([2, 4, 3], act, rng)
    x = rng.normal(size=(3, 2))
    w_out = rng.normal(size=(3, 3))

    def loss():
        out, _ = mlp_forward(p, x)
        return float(np.sum(w_out * out))

    out, cache = mlp_forward(p, x)
    grads, gx = mlp_backward(p, cache, w_out)
    fd = central_diff(loss, p.arrays())
    assert rel_err(grads, fd) < 1e-5
    (fdx,) = central_diff(loss, [x])
    assert rel_err([gx], [fdx]) < 1e-5


def test_zero_output_grad(rng):
    p = init_mlp([2, 4, 3], "tanh", rng)
    _, cache = mlp_forward(p, rng.normal(size=2))
    grads, gx = mlp_backward(p, cache, np.zeros(3))
    assert all(not g.any() for g in grads) and not gx.any()


def test_linear_layer_sum_loss():
    x = np.array([0.3, -1.2])
    p = MlpParams([np.ones((2, 3))], [np.zeros(3)], [])
    _, cache = mlp_forward(p, x)
    grads, _ = mlp_backward(p, cache, np.ones(3))
    assert np.array_equal(grads[0], np.outer(x, np.ones(3)))
    assert np.array_equal(grads[1], np.ones(3))


def test_forward_backward_pure(rng):
    p = init_mlp([2, 8, 8, 2], "softplus", rng)
    x = rng.normal(size=(16, 2))
    g = rng.normal(size=(16, 2))
    a = mlp_backward(p, mlp_forward(p, x)[1], g)
    b = mlp_backward(p, mlp_forward(p, x)[1], g)
    assert all(np.array_equal(u, v) for u, v in zip(a[0], b[0]))
    assert np.array_equal(a[1], b[1])


def test_init_is_glorot_bounded(rng):
    p = init_mlp([10, 30, 5], "tanh", rng)
    for w in p.weights:
        s = math.sqrt(6 / sum(w.shape))
        assert np.all(np.abs(w) <= s)


def test_time_embedding_zero():
    e = time_embedding(0, 8, 100)
    assert np.array_equal(e[0::2], np.zeros(4))
    assert np.array_equal(e[1::2], np.ones(4))


def test_time_embedding_direct_evaluation():
    e = time_embedding(1, 4, 100)
    expected = [math.sin(1.0), math.cos(1.0), math.sin(1.0 / 100.0), math.cos(1.0 / 100.0)]
    assert np.allclose(e, expected, rtol=0, atol=1e-15)
    assert np.array_equal(e, time_embedding(1, 4, 100))


def test_time_embedding_batched_matches_scalar():
    ts = np.array([1, 5, 100])
    batch = time_embedding(ts, 6, 100)
    for row, t in zip(batch, ts):
        assert np.array_equal(row, time_embedding(int(t), 6, 100))


def test_time_embedding_odd_dim():
    with pytest.raises(ConfigError):
        time_embedding(1, 5, 100)


def test_embedding_table_null_row(rng):
    table = EmbeddingTable.init(4, 3, rng)
    assert table.rows.shape == (5, 3)
    assert table.null_index == 4
    with pytest.raises(ShapeError):
        table.lookup(np.array([5]))
    g = table.backward(np.array([1, 1, 4]), np.ones((3, 3)))
    assert np.array_equal(g[1], [2, 2, 2]) and np.array_equal(g[4], [1, 1, 1]) and not g[0].any()


def test_adam_zero_grad_fixed_point(rng):
    p = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    before = [a.copy() for a in p]
    state = AdamState(lr=0.1)
    for _ in range(3):
        adam_step(state, p, [np.zeros_like(a) for a in p])
    assert all(np.array_equal(a, b) for a, b in zip(p, before))
    assert state.step == 3


@pytest.mark.parametrize("g", [3.0, -0.01, 1e4])
def test_adam_first_step_magnitude_is_lr(g):
    p = [np.array([1.0])]
    adam_step(AdamState(lr=0.05), p, [np.array([g])])
    assert p[0][0] == pytest.approx(1.0 - 0.05 * math.copysign(1, g), abs=1e-7)


def test_adam_two_steps_hand_stepped():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = [np.array([0.5])]
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    adam_step(state, p, [np.array([1.0])])
    adam_step(state, p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(theta, abs=1e-15)
    assert theta == pytest.approx(0.5 - 0.2, abs=1e-8)


def test_adam_rejects_nonfinite():
    with pytest.raises(TrainingError, match=r"index \(1,\)"):
        adam_step(AdamState(), [np.zeros(3)], [np.array([0.0, np.nan, 0.0])])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_array_roundtrip_bit_exact(values):
    a = np.array(values)
    b = decode_array(encode_array(a))
    assert a.tobytes() == b.tobytes()


def test_checkpoint_roundtrip(tmp_path, rng):
    p = init_mlp([2, 5, 3], ["softplus"], rng)
    path = tmp_path / "ck.json"
    save_checkpoint(path, "mlp", mlp_to_dict(p), {"note": "x"})
    payload, meta = load_checkpoint(path, "mlp")
    q = mlp_from_dict(payload)
    assert meta == {"note": "x"}
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))
    with pytest.raises(ValueError):
        load_checkpoint(path, "probe")
