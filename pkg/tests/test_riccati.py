import numpy as np
import pytest

from mfglq.cli import _resolve_model
from mfglq.model import EMFTCModel, TimeGrid, load_model
from mfglq.riccati import (solve_gamma, solve_gamma_bar, solve_xi, solve_xi_b, solve_zeta)

from conftest import random_game, scalar_control, scalar_game


def _tanh_model():
    # P + Pbar = 1, Q + Qbar = 1, terminal zero
    return scalar_game(Q=0.5, Qbar=0.5, P=0.5, Pbar=0.5, QT=0.0)


def test_xi_tanh(grid):
    Xi = solve_xi(_tanh_model(), grid)
    assert np.abs(Xi.samples[:, 0, 0] - np.tanh(1 - grid.times)).max() < 1e-10
    assert Xi.samples[-1, 0, 0] == 0.0


def test_xi_zero_fixed_point(grid):
    from mfglq.model import EMFGModel

    m = EMFGModel.build(1, 1, 1.0, B=np.eye(1), P=np.eye(1), validate=False)
    Xi = solve_xi(m, grid)
    assert np.all(Xi.samples == 0)


def test_xi_diagonal_decoupling(grid):
    from mfglq.model import EMFGModel

    m = EMFGModel.build(2, 2, 1.0, B=np.eye(2), Q=np.diag([1.0, 4.0]), P=np.eye(2))
    Xi = solve_xi(m, grid).samples
    s = 1 - grid.times
    assert np.abs(Xi[:, 0, 0] - np.tanh(s)).max() < 1e-10
    assert np.abs(Xi[:, 1, 1] - 2 * np.tanh(2 * s)).max() < 1e-9
    assert np.abs(Xi[:, 0, 1]).max() < 1e-14


def test_xi_symmetric_psd_and_monotone(rng, grid):
    m = random_game(rng)
    Xi = solve_xi(m, grid).samples
    assert np.abs(Xi - np.swapaxes(Xi, 1, 2)).max() <= 1e-9
    assert min(np.linalg.eigvalsh(X)[0] for X in Xi) >= -1e-9
    lo = solve_xi(scalar_game(Q=1.0), grid).samples
    hi = solve_xi(scalar_game(Q=1.5), grid).samples
    assert np.all(hi >= lo)


def test_zeta_zero_inputs(grid):
    m = scalar_game(Qbar=0.5, S=0.3, Abar=0.2)
    Xi = solve_xi(m, grid)
    z = np.zeros((grid.n_steps + 1, 1))
    assert np.all(solve_zeta(m, Xi, z, z, grid).samples == 0)


def test_zeta_quadrature_oracle(grid):
    from scipy.integrate import quad

    m = scalar_game(Q=0.5, Qbar=0.5, S=0.3, Abar=0.2, QT=0.0)
    Xi = solve_xi(m, grid)
    ones = np.ones((grid.n_steps + 1, 1))
    zeta = solve_zeta(m, Xi, ones, 0 * ones, grid).samples[:, 0]
    # zeta' = Xi zeta - f with f = Xi Abar - Qbar S, zeta(T) = 0, and Xi = tanh(T - t)
    xi = lambda t: np.tanh(1 - t)  # noqa: E731
    f = lambda t: xi(t) * 0.2 - 0.5 * 0.3  # noqa: E731
    phi = lambda t, s: np.cosh(1 - s) / np.cosh(1 - t)  # noqa: E731  exp(-int_t^s Xi)
    for t in (0.0, 0.4, 0.9):
        expected = quad(lambda s: phi(t, s) * f(s), t, 1, epsabs=1e-13)[0]
        assert zeta[int(round(t * 2000))] == pytest.approx(expected, abs=1e-9)


def test_gamma_equals_xi_without_mean_field(grid):
    m = scalar_game(N=0.2, QT=0.5)
    G = solve_gamma(m, grid)
    assert np.abs(G.samples - solve_xi(m, grid).samples).max() < 1e-9


def test_gamma_methods_agree(grid):
    m = scalar_game(Qbar=0.5, S=0.3, Abar=0.2, Pbar=0.5, R=0.2, QT=1.0)
    a = solve_gamma(m, grid, "fundamental").samples
    b = solve_gamma(m, grid, "direct").samples
    assert np.abs(a - b).max() < 1e-6


def test_gamma_counterexample_blows_up():
    ce = load_model(_resolve_model("counterexample")).replace(T=0.31)
    G = solve_gamma(ce, TimeGrid(0.31, 2000))
    assert not G.ok and 0 <= G.blow_up < 0.31


def test_gamma_bar_equals_xi_b_without_mean_field(grid):
    m = scalar_control(Q=2.0, QT=0.3)
    assert np.abs(solve_gamma_bar(m, grid).samples - solve_xi_b(m, grid).samples).max() < 1e-12


def test_gamma_bar_tanh(grid):
    m = scalar_control(Q=0.5, Qbar=0.5, P=0.5, Pbar=0.5)
    G = solve_gamma_bar(m, grid).samples[:, 0, 0]
    assert np.abs(G - np.tanh(1 - grid.times)).max() < 1e-10


def test_gamma_bar_symmetric(rng, grid):
    g = random_game(rng)
    data = {k: getattr(g, k) for k in ("A", "B", "Abar", "Bbar", "Q", "P", "Qbar", "Pbar", "S", "R",
                                       "Sbar", "Rbar", "N", "sigma")}
    m = EMFTCModel.build(2, 2, 1.0, QT=g.QT, x0_mean=g.x0_mean, **data)
    for sol in (solve_gamma_bar(m, grid), solve_xi_b(m, grid)):
        X = sol.samples
        assert np.abs(X - np.swapaxes(X, 1, 2)).max() <= 1e-9
        assert min(np.linalg.eigvalsh(0.5 * (M + M.T))[0] for M in X) >= -1e-9


def test_gamma_survives_fast_growing_flow():
    # the transition matrix from 0 grows like e^30, past the blow-up threshold
    m = scalar_game(A=30.0, Qbar=0.5, S=0.3, QT=1.0)
    g = TimeGrid(1.0, 4000)
    a = solve_gamma(m, g)
    assert a.ok
    assert np.abs(a.samples - solve_gamma(m, g, "direct").samples).max() < 1e-6
