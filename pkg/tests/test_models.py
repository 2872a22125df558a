import numpy as np
import pytest

from feddecomp import models as M
from feddecomp import tensor as T
from feddecomp.errors import DimensionError, ValidationError
from feddecomp.models import CONV, FC, DecomposedParam, LayerSpec, ModelSpec
from feddecomp.tensor import SgdConfig, Tensor, backward, sgd_step


@pytest.mark.parametrize("args,expected", [
    ((FC, 6, 4, 1, 0.5), 2),
    ((CONV, 3, 8, 3, 0.25), 2),
    ((FC, 2, 2, 1, 0.1), 1),
    ((FC, 5, 10, 1, 0.6), 3),  # 0.6*5 is 2.9999999999999996 in binary
    ((FC, 64, 32, 1, 1.0), 32),
])
def test_rank_for(args, expected):
    assert M.rank_for(*args) == expected


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.01])
def test_rank_for_rejects_ratio(ratio):
    with pytest.raises(ValidationError):
        M.rank_for(FC, 4, 4, 1, ratio)


def test_spec_validation():
    with pytest.raises(ValidationError):
        M.mlp_spec(4, 1)
    with pytest.raises(DimensionError):
        ModelSpec("mlp", (4,), 3, [LayerSpec(FC, 4, 5), LayerSpec(FC, 6, 3)])


def test_factor_shapes():
    spec = M.cnn_spec((1, 8, 8), 10)
    p = M.init_decomposed(spec, 0.4, 0.25, np.random.default_rng(0))
    conv1, conv2, fc = p.weights
    # conv: B (I*K) x r', A r' x (O*K), r' = floor(0.25 * min(I, O) * K)
    assert conv1.factor_b.shape == (3, 1) and conv1.factor_a.shape == (1, 24)
    assert conv2.factor_b.shape == (24, 6) and conv2.factor_a.shape == (6, 48)
    assert fc.factor_b.shape == (64, 4) and fc.factor_a.shape == (4, 10)
    assert all(w.sigma.shape == l.weight_shape for w, l in zip(p.weights, spec.layers))


def test_init_zero_b_and_deterministic():
    spec = M.mlp_spec(16, 8)
    a = M.init_decomposed(spec, 0.4, 0.8, np.random.default_rng(42))
    b = M.init_decomposed(spec, 0.4, 0.8, np.random.default_rng(42))
    for ta, tb in zip(a.tensors(), b.tensors()):
        assert ta.data.tobytes() == tb.data.tobytes()
    for w in a.weights:
        assert not np.any(w.factor_b.data)
    assert not np.any(M.flatten_tau(a))


def test_factor_a_variance_is_one_over_rank():
    spec = ModelSpec("mlp", (400,), 400, [LayerSpec(FC, 400, 400)])
    p = M.init_decomposed(spec, 0.1, 0.8, np.random.default_rng(3))
    w = p.weights[0]
    assert w.inner_rank == 40
    assert np.var(w.factor_a.data) == pytest.approx(1 / 40, rel=0.05)


def test_effective_weight_fc_hand_example():
    p = DecomposedParam(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[1.0], [0.0]]), Tensor([[0.0, 1.0]]), 1)
    np.testing.assert_array_equal(M.effective_weight(p).data, [[1, 1], [0, 1]])


def test_effective_weight_conv_hand_example():
    p = DecomposedParam(Tensor(np.zeros((1, 1, 2, 2))), Tensor([[1.0], [0.0]]), Tensor([[1.0, 2.0]]), 1, CONV)
    np.testing.assert_array_equal(M.tau(p).data[0, 0], [[1, 2], [0, 0]])


def test_conv_fold_against_index_enumeration(rng):
    i_dim, o_dim, k, r = 3, 4, 3, 2
    b = rng.standard_normal((i_dim * k, r))
    a = rng.standard_normal((r, o_dim * k))
    p = DecomposedParam(Tensor(np.zeros((i_dim, o_dim, k, k))), Tensor(b), Tensor(a), r, CONV)
    prod = b @ a
    expected = np.zeros((i_dim, o_dim, k, k))
    for i in range(i_dim):
        for o in range(o_dim):
            for k1 in range(k):
                for k2 in range(k):
                    expected[i, o, k1, k2] = prod[i * k + k1, o * k + k2]
    np.testing.assert_array_equal(M.tau(p).data, expected)


def _plain_forward_mlp(weights, biases, x):
    h = x
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if k < len(weights) - 1:
            h = np.maximum(h, 0)
    return h


def test_init_identity_mlp_exact(rng):
    spec = M.mlp_spec(16, 8)
    p = M.init_decomposed(spec, 0.4, 0.8, rng)
    for _ in range(10):
        x = rng.standard_normal((7, 16))
        out = M.forward(spec, p, x).data
        ref = _plain_forward_mlp([w.sigma.data for w in p.weights], [b.data for b in p.biases], x)
        assert out.tobytes() == ref.tobytes()


def test_mlp_loss_matches_straight_line_oracle(rng):
    spec = M.mlp_spec(5, 3, hidden=(4,))
    p = M.init_decomposed(spec, 0.5, 0.8, rng)
    for w in p.weights:
        w.factor_b.data = rng.standard_normal(w.factor_b.shape)
    for b in p.biases:
        b.data = rng.standard_normal(b.shape)
    x = rng.standard_normal((6, 5))
    y = np.array([0, 1, 2, 2, 1, 0])
    weights = [w.sigma.data + w.factor_b.data @ w.factor_a.data for w in p.weights]
    z = _plain_forward_mlp(weights, [b.data for b in p.biases], x)
    z = z - z.max(axis=1, keepdims=True)
    ref = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(6), y])
    got = M.loss(M.forward(spec, p, x), y).data.item()
    assert abs(got - ref) < 1e-10


def test_loss_limits():
    assert M.loss(Tensor(np.zeros((3, 4))), [0, 1, 2]).data.item() == pytest.approx(np.log(4))
    logits = np.full((2, 3), -500.0)
    logits[0, 1] = logits[1, 2] = 500.0
    assert M.loss(Tensor(logits), [1, 2]).data.item() < 1e-300


def test_forward_shape_mismatch():
    spec = M.mlp_spec(16, 8)
    p = M.init_decomposed(spec, 0.4, 0.8, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        M.forward(spec, p, np.zeros((2, 15)))


def test_capacity_neutrality(rng):
    """Same effective weight => same function, whether it lives in sigma or in B@A."""
    spec = M.cnn_spec((1, 8, 8), 4)
    p = M.init_decomposed(spec, 0.5, 0.5, rng)
    for w in p.weights:
        w.factor_b.data = rng.standard_normal(w.factor_b.shape)
    x = rng.standard_normal((3, 1, 8, 8))
    out = M.forward(spec, p, x).data
    plain = p.copy()
    for w in plain.weights:
        w.sigma.data = M.effective_weight(w).data
        w.factor_b.data = np.zeros_like(w.factor_b.data)
    assert np.max(np.abs(M.forward(spec, plain, x).data - out)) < 1e-12


def _step(spec, p, x, y, phase):
    M.set_phase(p, phase)
    grads = backward(M.loss(M.forward(spec, p, x), y))
    sgd_step(*T.collect_grads(M.trainable(p), grads), SgdConfig(0.1))
    return grads


def _random_model(rng):
    spec = M.mlp_spec(6, 3, hidden=(5,))
    p = M.init_decomposed(spec, 0.5, 0.8, rng)
    for w in p.weights:
        w.factor_b.data = rng.standard_normal(w.factor_b.shape)
    return spec, p


def test_tau_phase_freezes_sigma(rng):
    spec, p = _random_model(rng)
    before = [w.sigma.data.copy() for w in p.weights] + [b.data.copy() for b in p.biases]
    x, y = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
    for _ in range(3):
        _step(spec, p, x, y, "tau")
    after = [w.sigma.data for w in p.weights] + [b.data for b in p.biases]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))


def test_sigma_phase_freezes_factors(rng):
    spec, p = _random_model(rng)
    before = [t.data.copy() for w in p.weights for t in (w.factor_b, w.factor_a)]
    x, y = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
    for _ in range(3):
        _step(spec, p, x, y, "sigma")
    after = [t.data for w in p.weights for t in (w.factor_b, w.factor_a)]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))


def test_joint_phase_moves_everything(rng):
    spec, p = _random_model(rng)
    x, y = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
    grads = _step(spec, p, x, y, "joint")
    for w in p.weights:
        for t in (w.sigma, w.factor_b, w.factor_a):
            assert np.any(grads[t] != 0)


def test_unknown_phase():
    with pytest.raises(ValidationError):
        M.set_phase(M.init_decomposed(M.mlp_spec(4, 2), 0.5, 0.5, np.random.default_rng(0)), "both")


def test_effective_weight_linear_in_each_part(rng):
    s1, s2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    b1, b2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    a = rng.standard_normal((2, 3))

    def ew(s, b):
        return M.effective_weight(DecomposedParam(Tensor(s), Tensor(b), Tensor(a), 2)).data

    np.testing.assert_allclose(ew(s1 + s2, b1 + b2), ew(s1, b1) + ew(s2, b2), atol=1e-12)
    np.testing.assert_allclose(ew(2.5 * s1, 2.5 * b1), 2.5 * ew(s1, b1), atol=1e-12)


def test_flatten_roundtrip_and_distance(rng):
    spec = M.cnn_spec((1, 8, 8), 4)
    p = M.init_decomposed(spec, 0.4, 0.8, rng)
    flat = M.flatten_sigma(p)
    assert flat.size == sum(w.sigma.size for w in p.weights)
    for back, w in zip(M.unflatten_sigma(p, flat), p.weights):
        assert back.tobytes() == w.sigma.data.tobytes()
    assert np.linalg.norm(M.flatten_sigma(p.copy()) - flat) == 0
    with pytest.raises(DimensionError):
        M.unflatten_sigma(p, flat[:-1])


def test_rank_bound_after_training(rng):
    spec = M.mlp_spec(16, 8)
    p = M.init_decomposed(spec, 0.2, 0.8, rng)
    x, y = rng.standard_normal((32, 16)), rng.integers(0, 8, 32)
    for _ in range(30):
        _step(spec, p, x, y, "joint")
    for w in p.weights:
        sv = np.linalg.svd(M.tau(w).data, compute_uv=False)
        assert np.all(sv[w.inner_rank:] < 1e-9)
