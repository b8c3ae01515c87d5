import math

import numpy as np
import pytest

from mfglq.cli import _resolve_model
from mfglq.model import EMFGModel, TimeGrid, load_model
from mfglq.spectral import (check_global, check_refined, check_small_time, check_weyl, compute_K,
                            eig_sym, epsilon_window, singular_values)

from conftest import scalar_game


def test_eig_and_singular_values_basics():
    assert np.allclose(eig_sym(np.eye(2)), [1, 1])
    assert np.allclose(singular_values(np.eye(2)), [1, 1])
    assert np.allclose(singular_values([[0, 1], [0, 0]]), [1, 0])
    lo, hi = eig_sym(np.array([[2.1, -0.3], [-0.3, 0.2]]))
    assert lo == pytest.approx((2.3 - math.sqrt(3.97)) / 2, abs=1e-12)
    assert hi == pytest.approx((2.3 + math.sqrt(3.97)) / 2, abs=1e-12)


def test_psd_spectrum_property(rng):
    for _ in range(50):
        X = rng.standard_normal((3, 3))
        M = X @ X.T
        ev = eig_sym(M)
        assert ev[0] >= -1e-12
        assert np.allclose(singular_values(M), np.sort(np.abs(ev))[::-1])


def _only_P():
    # not a valid control problem (Q = B = 0), but the small-time constants are defined
    return EMFGModel.build(1, 1, 0.1, P=np.eye(1), validate=False)


def test_small_time_threshold():
    m = _only_P()
    rep = check_small_time(m, TimeGrid(0.1, 10))
    assert rep.scalars["alpha"] == pytest.approx(2) and rep.scalars["beta"] == pytest.approx(2)
    assert rep.scalars["T_max"] == pytest.approx(math.log(2) / 4)
    assert rep.holds
    assert not check_small_time(m, TimeGrid(0.2, 10)).holds
    assert check_small_time(random_bounded(), TimeGrid(1e-6, 4)).holds


def random_bounded():
    return scalar_game(A=0.7, Abar=0.2, Qbar=0.3, S=0.1)


def test_refined_condition_examples(grid):
    assert check_refined(scalar_game(), grid).holds
    rep = check_refined(scalar_game(N=0.5), grid)
    assert rep.holds and rep.scalars["cond1_lhs"] == pytest.approx(0.5625)
    ce = load_model(_resolve_model("counterexample"))
    rep = check_refined(ce, TimeGrid(ce.T, 400))
    assert not rep.holds and rep.scalars["cond1_lhs"] > 1


def test_K_scalar_example(grid):
    K = compute_K(scalar_game(Qbar=1.0, Pbar=1.0), grid)
    assert K["K1"] == pytest.approx(2) and K["K2"] == pytest.approx(0.5)
    assert K["K3"] == K["K4"] == K["K5"] == 0
    rep = check_global(K)
    assert rep.holds and rep.scalars["rhs"] == pytest.approx(2)


def test_K_zero_total_control(grid):
    K = compute_K(scalar_game(Bbar=-1.0, Qbar=1.0, Pbar=1.0), grid)
    assert K["K2"] == 0
    assert not check_global(K).holds


def test_counterexample_K_positive_but_global_fails():
    ce = load_model(_resolve_model("counterexample"))
    K = compute_K(ce, TimeGrid(ce.T, 400))
    assert K["K1"] > 0 and K["K2"] > 0
    assert not check_global(K).holds


def test_global_window():
    K = {"K1": 1.0, "K2": 1.0, "K3": 0.0, "K4": 0.0, "K5": 0.0}
    assert check_global(K).holds
    assert epsilon_window(K) == (0.0, 1.0)


def test_global_implies_window(rng):
    for _ in range(200):
        K = dict(zip(["K1", "K2", "K3", "K4", "K5"], rng.uniform(0, 2, 5) * [1, 1, 0.3, 0.3, 0.3]))
        if check_global(K).holds:
            lo, hi = epsilon_window(K)
            assert lo < hi == K["K2"]


def test_weyl_examples(grid):
    assert check_weyl(scalar_game(Qbar=1.0, Pbar=1.0), grid).holds
    rep = check_weyl(scalar_game(Qbar=1.0, Pbar=1.0, Bbar=0.6), grid)
    assert rep.scalars["max_lhs_Bbar"] == pytest.approx(0.6)
    assert rep.scalars["min_rhs_Bbar"] == pytest.approx(1.0)
    assert rep.holds


def test_checks_are_pure(grid):
    m = random_bounded()
    assert check_refined(m, grid).to_json() == check_refined(m, grid).to_json()
