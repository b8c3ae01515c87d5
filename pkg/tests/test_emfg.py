import numpy as np
import pytest

from mfglq.emfg import (SolvabilityError, counterexample_model, counterexample_phis, counterexample_root,
                        counterexample_scan, simulate_representative, solve_emfg, solve_mean_field)
from mfglq.model import TimeGrid
from mfglq.riccati import solve_xi
from mfglq.spectral import mean_field_blocks

from conftest import random_game, scalar_game


def _mf_game(**kw):
    base = dict(Qbar=0.5, S=0.3, Abar=0.2, Pbar=0.5, R=0.2, Sbar=0.1, N=0.1, QT=1.0, sigma=0.5,
                x0_cov=[[0.25]])
    base.update(kw)
    return scalar_game(**base)


def test_zero_initial_mean(grid):
    fb = solve_mean_field(_mf_game(x0_mean=[0.0]), grid)
    assert not fb.xi.any() and not fb.eta.any() and not fb.upsilon.any()


def test_classical_lq_cosh(grid):
    fb = solve_mean_field(scalar_game(QT=0.0), grid)
    assert np.abs(fb.xi[:, 0] - np.cosh(1 - grid.times) / np.cosh(1.0)).max() < 1e-8


def test_counterexample_shooting_singular_at_root():
    T0 = counterexample_root()
    assert 0.3 < T0 < 0.31
    m = counterexample_model(T=T0)
    with pytest.raises(SolvabilityError, match="non-existence or non-uniqueness"):
        solve_mean_field(m, TimeGrid(T0, 2000), "shooting")


def test_counterexample_methods_agree_before_root():
    g = TimeGrid(0.29, 2000)
    m = counterexample_model(T=0.29)
    a = solve_mean_field(m, g, "gamma")
    b = solve_mean_field(m, g, "shooting")
    assert np.abs(a.xi - b.xi).max() < 1e-6 and np.abs(a.eta - b.eta).max() < 1e-6


@pytest.mark.parametrize("method", ["gamma", "shooting"])
def test_terminal_and_fixed_point_identities(method, grid):
    m = _mf_game()
    fb = solve_mean_field(m, grid, method)
    QTc = m.QT + m.QbarT_cal
    assert np.linalg.norm(fb.eta[-1] - QTc @ fb.xi[-1]) <= 1e-8
    b = mean_field_blocks(m, grid.times)
    K = b["Kc"]
    r = b["r"]
    resid = fb.upsilon + np.einsum("kij,kj->ki", K, np.einsum("kij,kj->ki", r.Sbar_cal, fb.xi)
                                   + np.einsum("kji,kj->ki", b["c"].B, fb.eta))
    assert np.abs(resid).max() <= 1e-9


def test_feedback_classical_gain(grid):
    m = scalar_game(N=0.3, Pbar=0.5, QT=0.5)
    sol = solve_emfg(m, grid)
    Xi = sol.Xi.samples[:, 0, 0]
    assert np.abs(sol.feedback.F[:, 0, 0] + (0.3 + Xi) / 1.5).max() < 1e-12
    assert not sol.feedback.G.any()
    assert np.abs(sol.feedback.g).max() < 1e-12
    sol = solve_emfg(scalar_game(QT=0.5), grid)
    assert np.abs(sol.feedback.F[:, 0, 0] + sol.Xi.samples[:, 0, 0]).max() < 1e-12


def test_classical_reduction_matches_lqr(grid):
    m = scalar_game(N=0.2, QT=0.5)
    sol = solve_emfg(m, grid)
    Xi = solve_xi(m, grid).samples[:, 0, 0]
    gain = -(0.2 + Xi)
    from mfglq.ode_core import HalfGridRHS, rk4_integrate
    from mfglq.riccati import half_grid

    gh = half_grid(gain)
    x = rk4_integrate(HalfGridRHS(0, 1, grid.n_steps, lambda i, y: gh[i] * y), [1.0], 0, 1,
                      grid.n_steps).y[:, 0]
    assert np.abs(sol.fbode.xi[:, 0] - x).max() < 1e-9
    assert np.abs(sol.fbode.upsilon[:, 0] - gain * x).max() < 1e-9


@pytest.mark.parametrize("make", [lambda: counterexample_model(T=0.25), lambda: _mf_game(),
                                  lambda: random_game(np.random.default_rng(3))])
def test_mean_feedback_reproduces_upsilon(make):
    m = make()
    g = TimeGrid(m.T, 1000)
    sol = solve_emfg(m, g)
    fbk = sol.feedback
    v = np.stack([fbk.control(k, sol.fbode.xi[k]) for k in range(g.n_steps + 1)])
    assert np.abs(v - sol.fbode.upsilon).max() <= 1e-8


def test_gamma_method_fails_past_root():
    with pytest.raises(SolvabilityError, match="Gamma"):
        solve_mean_field(counterexample_model(T=0.31), TimeGrid(0.31, 1000))


def test_noise_free_simulation_is_exact():
    m = _mf_game(sigma=0.0, x0_cov=[[0.0]])
    g = TimeGrid(1.0, 500)
    sol = solve_emfg(m, g)
    res = simulate_representative(m, sol.feedback, sol.fbode, 50, seed=1)
    assert res.fixed_point_residual <= 1e-9


def test_scalar_fixed_point_monte_carlo():
    m = _mf_game()
    g = TimeGrid(1.0, 200)
    sol = solve_emfg(m, g)
    res = simulate_representative(m, sol.feedback, sol.fbode, 10000, seed=0)
    assert res.max_error_ratio <= 3


def test_std_error_shrinks_with_paths():
    m = _mf_game()
    g = TimeGrid(1.0, 100)
    sol = solve_emfg(m, g)
    a = simulate_representative(m, sol.feedback, sol.fbode, 2000, seed=1).std_err.mean()
    b = simulate_representative(m, sol.feedback, sol.fbode, 4000, seed=2).std_err.mean()
    assert 0.6 <= b / a <= 0.82


def test_simulation_independent_of_threads(monkeypatch):
    m = _mf_game()
    g = TimeGrid(1.0, 50)
    sol = solve_emfg(m, g)
    out = []
    for th in ("1", "4"):
        monkeypatch.setenv("MFGLQ_THREADS", th)
        out.append(simulate_representative(m, sol.feedback, sol.fbode, 600, seed=7).mean)
    assert np.array_equal(out[0], out[1])


def test_counterexample_printed_values():
    assert counterexample_phis(0.3)[0] == pytest.approx(0.0145965, abs=5e-4)
    assert counterexample_phis(0.31)[0] == pytest.approx(-0.0346916, abs=5e-4)


def test_counterexample_scan_sign_changes(tmp_path):
    scan = counterexample_scan(0.29, 0.32, 31, 2000)
    (lo, hi), = scan.sign_changes("phi1")
    assert 0.3 <= lo < hi <= 0.31
    assert scan.sign_changes("phi2") == []
    inside = (scan.T >= 0.3) & (scan.T <= 0.31)
    assert np.all(scan.phi2[inside] > 0)
    scan.write_csv(tmp_path / "scan.csv")
    assert (tmp_path / "scan.csv").read_text().startswith("T,Phi1,Phi2")
