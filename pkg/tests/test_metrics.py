import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ebm_lifecycle.energy import DoubleWellEnergy, QuadraticEnergy
from ebm_lifecycle.metrics import (Grid, GridPmf, batch_diversity, empirical_pmf, gaussian_frechet,
                                   frechet_from_moments, grid_boltzmann, kl_divergence, lifetime_ks_test,
                                   lifetime_stats, saturation_stat, steady_state_kl, total_variation)


def test_grid_limits():
    with pytest.raises(ValueError):
        Grid((0, 0, 0), (1, 1, 1), (4, 4, 4))
    with pytest.raises(ValueError):
        Grid.regular(0, 1, 513)
    with pytest.raises(ValueError):
        Grid.regular(1, 0, 10)
    with pytest.raises(ValueError):
        grid_boltzmann(QuadraticEnergy(3), Grid.regular(-1, 1, 4, dim=2))


def test_quadratic_pmf_symmetric():
    pmf = grid_boltzmann(QuadraticEnergy(1), Grid.regular(-4, 4, 81))
    assert pmf.probs.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(pmf.probs, pmf.probs[::-1], rtol=1e-12)


def test_temperature_sharpens():
    g = Grid.regular(-3, 3, 60)
    hot, cold = grid_boltzmann(DoubleWellEnergy(), g, 0.5), grid_boltzmann(DoubleWellEnergy(), g, 4.0)
    assert cold.probs.max() > hot.probs.max()


def test_refinement_convergence():
    e = DoubleWellEnergy()
    coarse = grid_boltzmann(e, Grid.regular(-3, 3, 200)).probs
    fine = grid_boltzmann(e, Grid.regular(-3, 3, 400)).probs.reshape(200, 2).sum(axis=1)
    assert 0.5 * np.abs(coarse - fine).sum() <= 1e-3


def test_point_mass_and_overflow():
    g = Grid.regular(0, 1, 10)
    p = empirical_pmf(np.full(20, 0.55), g)
    assert p.probs[5] == 1.0 and p.overflow == 0.0
    q = empirical_pmf(np.r_[np.full(6, 0.55), np.full(4, 7.0)], g)
    assert q.overflow == pytest.approx(0.4)
    assert q.masses().sum() == pytest.approx(1.0)


def test_empirical_converges_to_truth():
    g = Grid.regular(-3, 3, 60)
    truth = grid_boltzmann(DoubleWellEnergy(), g)
    rng = np.random.default_rng(0)
    cells = rng.choice(60, size=10 ** 6, p=truth.probs)
    x = g.centers()[0][cells]
    assert kl_divergence(empirical_pmf(x, g), truth) <= 5e-3


def test_kl_closed_forms():
    g = Grid.regular(0, 2, 2)
    p, q = GridPmf(g, [1.0, 0.0]), GridPmf(g, [0.5, 0.5])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-10)
    assert kl_divergence(p, q) == pytest.approx(np.log(2), abs=1e-9)
    with pytest.raises(ValueError):
        kl_divergence(p, GridPmf(Grid.regular(0, 3, 2), [0.5, 0.5]))


def test_overflow_penalised():
    g = Grid.regular(-1, 1, 4)
    inside = empirical_pmf(np.linspace(-0.9, 0.9, 8), g)
    leaky = empirical_pmf(np.r_[np.linspace(-0.9, 0.9, 8), [5.0, 5.0]], g)
    uniform = GridPmf(g, np.full(4, 0.25))
    assert kl_divergence(leaky, uniform) > kl_divergence(inside, uniform)
    assert steady_state_kl(np.linspace(-0.9, 0.9, 8), uniform) == pytest.approx(kl_divergence(inside, uniform))


def test_frechet_closed_forms():
    assert frechet_from_moments(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert frechet_from_moments(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0)
    x = np.random.default_rng(0).standard_normal((100, 2))
    assert gaussian_frechet(x, x) == pytest.approx(0.0, abs=1e-10)


def test_frechet_degenerate_regularised():
    x = np.zeros((10, 2))
    x[:, 0] = np.arange(10)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        val = gaussian_frechet(x, x)
    assert any(issubclass(i.category, RuntimeWarning) for i in w)
    assert val == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        gaussian_frechet(np.zeros((2, 2)), np.zeros((5, 2)))


def test_diversity():
    assert batch_diversity(np.zeros((5, 3))) == 0.0
    assert batch_diversity([[0.0, 0.0], [2.0, 0.0]]) == 2.0
    x = np.random.default_rng(1).standard_normal((1000, 8))
    assert batch_diversity(x) == pytest.approx(np.sqrt(2 * 8), rel=0.05)


def test_saturation():
    assert saturation_stat(np.zeros((4, 2))) == (0.0, 0.0)
    assert saturation_stat(np.full((3, 2), 2.0), (0.0, 1.0))[1] == 1.0


def test_lifetime_stats():
    assert lifetime_stats([]).empty
    st_ = lifetime_stats([100] * 50)
    assert st_.mean == 100 and st_.n_events == 50
    rng = np.random.default_rng(0)
    lt = 100 * rng.geometric(0.05, size=10000)
    assert lifetime_stats(lt).mean == pytest.approx(2000, rel=0.05)
    assert lifetime_ks_test(lt, 0.05, 100).pvalue > 0.01
    assert lifetime_ks_test(100 * rng.geometric(0.08, size=10000), 0.05, 100).pvalue < 0.01


@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 30))
def test_kl_non_negative(seed, n):
    rng = np.random.default_rng(seed)
    g = Grid.regular(0, 1, n)
    p, q = GridPmf(g, rng.dirichlet(np.ones(n))), GridPmf(g, rng.dirichlet(np.ones(n)))
    assert kl_divergence(p, q) >= 0
    assert 0 <= total_variation(p, q) <= 1


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_frechet_symmetric_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((50, 2)) @ rng.standard_normal((2, 2))
    b = rng.standard_normal((60, 2)) + rng.standard_normal(2)
    fab, fba = gaussian_frechet(a, b), gaussian_frechet(b, a)
    assert fab >= 0
    assert fab == pytest.approx(fba, rel=1e-7, abs=1e-9)
