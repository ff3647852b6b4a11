import numpy as np
import pytest
from hypothesis import given, strategies as st

from ebm_lifecycle.autodiff import DenseNet, Layer, ShapeError
from ebm_lifecycle.generator import Generator, cooperative_grad, cooperative_loss, generate
from ebm_lifecycle.metrics import batch_diversity
from ebm_lifecycle.optim import OptimizerState, adam_step


def test_identity_generator():
    g = Generator.affine(np.eye(3), np.zeros(3))
    z = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(generate(g, z), z)


def test_generation_reproducible_and_diverse():
    g = Generator.init(2, 2, (8,), np.random.default_rng(1))
    z = np.random.default_rng(2).standard_normal((50, 2))
    np.testing.assert_array_equal(g.generate(z), g.generate(z))
    assert batch_diversity(g.generate(z)) > 0


def test_rank_one_generator_has_diversity():
    g = Generator.affine([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    z = np.random.default_rng(3).standard_normal((20, 2))
    assert batch_diversity(g.generate(z)) > 0


def test_dimension_mismatch_rejected():
    g = Generator.affine(np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        g.generate(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        cooperative_loss(g, np.zeros((3, 2)), np.zeros((4, 2)))


def test_loss_values():
    g = Generator.affine(np.eye(2), np.zeros(2))
    z = np.random.default_rng(0).standard_normal((4, 2))
    assert cooperative_loss(g, z, z) == 0.0
    zero = Generator.affine([[0.0]], [0.0])
    assert cooperative_loss(zero, np.ones((4, 1)), np.ones((4, 1))) == 1.0


def test_perfect_reconstruction_zero_gradient():
    g = Generator.init(2, 2, (4,), np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal((6, 2))
    for p in cooperative_grad(g, z, g.generate(z)):
        np.testing.assert_array_equal(p, 0.0)


def test_scalar_chain_rule():
    g = Generator.affine([[1.0]], [0.0])
    grads = cooperative_grad(g, [[1.0]], [[2.0]])
    assert grads[0][0, 0] == pytest.approx(-2.0)


def test_gradient_matches_finite_differences():
    g = Generator.init(2, 3, (5,), np.random.default_rng(4), activation="tanh")
    rng = np.random.default_rng(5)
    z, t = rng.standard_normal((7, 2)), rng.standard_normal((7, 3))
    grads = cooperative_grad(g, z, t)
    params = [p.copy() for p in g.params()]
    h = 1e-6
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            o = flat[j]
            flat[j] = o + h
            fp = cooperative_loss(g.with_params(params), z, t)
            flat[j] = o - h
            fm = cooperative_loss(g.with_params(params), z, t)
            flat[j] = o
            num = (fp - fm) / (2 * h)
            assert abs(grads[k].reshape(-1)[j] - num) <= 1e-4 * (abs(num) + 1e-8) + 1e-9


def test_shift_equivariance_with_bias():
    g = Generator.init(2, 2, (4,), np.random.default_rng(6))
    rng = np.random.default_rng(7)
    z, t = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    c = np.array([3.0, -1.0])
    params = g.params()
    shifted = g.with_params(params[:-1] + [params[-1] + c])
    for a, b in zip(cooperative_grad(g, z, t), cooperative_grad(shifted, z, t + c)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_linear_generator_converges_to_least_squares():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((40, 2))
    t = z @ np.array([[1.5, -0.3], [0.2, 0.8]]) + np.array([0.5, -1.0]) + 0.1 * rng.standard_normal((40, 2))
    za = np.hstack([z, np.ones((40, 1))])
    sol, *_ = np.linalg.lstsq(za, t, rcond=None)
    g = Generator.affine(np.zeros((2, 2)), np.zeros(2))
    opt = OptimizerState.zeros_like(g.params())
    for i in range(6000):
        lr = 0.05 if i < 3000 else 0.005
        g = g.with_params(adam_step(opt, g.params(), cooperative_grad(g, z, t), lr))
    # polish with exact gradient steps on the quadratic
    for _ in range(3000):
        g = g.with_params([p - 0.2 * q for p, q in zip(g.params(), cooperative_grad(g, z, t))])
    np.testing.assert_allclose(g.params()[0], sol[:2].T, atol=1e-6)
    np.testing.assert_allclose(g.params()[1], sol[2], atol=1e-6)


def test_normalized_generator_runs():
    g = Generator.init(2, 2, (8,), np.random.default_rng(0), normalize=True)
    z = np.random.default_rng(1).standard_normal((16, 2))
    out = g.generate(z)
    assert out.shape == (16, 2) and np.all(np.isfinite(out))
    assert len(cooperative_grad(g, z, out + 1.0)) == 4


@given(seed=st.integers(0, 10000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    g = Generator.init(2, 2, (3,), rng)
    z, t = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    assert cooperative_loss(g, z, t) >= 0
    assert cooperative_loss(g, z, g.generate(z)) == 0.0
