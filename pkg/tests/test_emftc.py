import numpy as np
import pytest

from mfglq.emfg import solve_emfg
from mfglq.emftc import (check_mftc_conditions, decomposed_objective, gateaux_test, mean_objective,
                         simulate_mftc, solve_mftc)
from mfglq.grid import GridParams, storage_mftc_model
from mfglq.model import TimeGrid

from conftest import scalar_control, scalar_game


def _mf_control(**kw):
    base = dict(Abar=0.2, Qbar=0.5, Pbar=0.5, S=0.3, R=0.2, Sbar=0.1, Rbar=0.1, N=0.1, QT=1.0,
                QbarT=0.5, ST=0.2, sigma=0.5, x0_cov=[[0.25]])
    base.update(kw)
    return scalar_control(**base)


def test_conditions_hold_for_mild_model(grid):
    assert check_mftc_conditions(scalar_control(Qbar=0.5, Pbar=0.5, Bbar=0.2), grid).holds


def test_conditions_fail_without_control(grid):
    rep = check_mftc_conditions(scalar_control(B=0.0, Bbar=0.0), grid)
    assert not rep.holds and not rep.scalars["mean_control_holds"]


@pytest.mark.parametrize("p0", [0.05, 0.1, 2.0])
def test_grid_mapping_satisfies_conditions(p0, grid):
    assert check_mftc_conditions(storage_mftc_model(GridParams(p0=p0)), grid).holds


def test_zero_mean_stays_zero(grid):
    sol = solve_mftc(_mf_control(x0_mean=[0.0]), grid)
    assert not sol.xbar.any() and not sol.vbar.any()


def test_classical_reduction(grid):
    m = scalar_control(N=0.2, QT=0.5)
    sol = solve_mftc(m, grid)
    assert np.abs(sol.gamma_bar.samples - sol.xi_b.samples).max() < 1e-12
    assert np.abs(sol.K_dev - sol.K_mean).max() < 1e-12


def test_agrees_with_game_without_interaction(grid):
    a = solve_mftc(scalar_control(N=0.2, QT=0.5), grid)
    b = solve_emfg(scalar_game(N=0.2, QT=0.5), grid)
    assert np.abs(a.xbar - b.fbode.xi).max() < 1e-9
    assert np.abs(a.vbar - b.fbode.upsilon).max() < 1e-9


def test_mc_mean_tracks_xbar():
    m = _mf_control()
    sol = solve_mftc(m, TimeGrid(1.0, 200))
    assert simulate_mftc(m, sol, 10000, seed=0).max_error_ratio <= 3


def test_objective_decomposition_matches_mc():
    m = _mf_control()
    sol = solve_mftc(m, TimeGrid(1.0, 200))
    mean, se = mean_objective(m, sol, 10000, seed=0)
    assert abs(mean - decomposed_objective(m, sol)) <= 3 * se


def test_gateaux_small():
    m = _mf_control()
    sol = solve_mftc(m, TimeGrid(1.0, 96))
    rep = gateaux_test(m, sol, n_directions=3, n_paths=2000, seed=0)
    assert rep.holds
    for d in rep.directions:
        q = np.array(d.diffs) / np.array(rep.epsilons) ** 2
        assert q.max() / q.min() < 1.2


def test_gateaux_rejects_zero_epsilon():
    m = _mf_control()
    sol = solve_mftc(m, TimeGrid(1.0, 48))
    with pytest.raises(ValueError):
        gateaux_test(m, sol, n_directions=1, epsilons=(0.0, 0.1), n_paths=10)


@pytest.mark.parametrize("scale", [0.9, 0.97, 1.03, 1.1])
def test_fluctuation_gain_is_optimal(scale):
    # deterministic directions only probe the mean; the fluctuation gain is
    # checked on the exact decomposed objective instead
    import dataclasses

    m = _mf_control()
    sol = solve_mftc(m, TimeGrid(1.0, 2000))
    worse = dataclasses.replace(sol, K_dev=sol.K_dev * scale)
    assert decomposed_objective(m, worse) > decomposed_objective(m, sol)
