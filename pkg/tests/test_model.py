import json

import numpy as np
import pytest

from mfglq.model import (EMFGModel, MatrixPath, ModelError, TimeGrid, load_model, model_from_dict,
                         reduce, validate_convexity)
from mfglq.cli import _resolve_model

from conftest import scalar_game


def test_counterexample_file_loads_with_identity_weights():
    m = load_model(_resolve_model("counterexample"), "emfg")
    assert isinstance(m, EMFGModel) and (m.n, m.m) == (2, 2)
    for name in ("S", "R", "B"):
        assert np.allclose(getattr(m, name)(0.1), np.eye(2))
    assert np.allclose(m.Bbar(0.1), 0)


def test_negative_weight_rejected():
    with pytest.raises(ModelError, match="PSD"):
        scalar_game(Q=-1.0)


def test_scalar_constant_paths_and_round_trip(tmp_path):
    m = scalar_game(Qbar=0.5, sigma=0.2)
    assert m.Q.is_constant
    p = tmp_path / "m.json"
    m.save(p)
    again = load_model(p)
    assert json.dumps(again.to_dict()) == json.dumps(m.to_dict())


def test_sampled_path_interpolates_linearly():
    path = MatrixPath.sampled([0.0, 1.0], [[[0.0]], [[2.0]]])
    assert path(0.25)[0, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("data, msg", [
    ({"n": 1, "m": 1}, "missing field"),
    ({"n": 1, "m": 1, "T": 1, "coefficients": {"Q": {"type": "constant", "value": [[1, 0]]}}},
     "dimension mismatch"),
    ({"n": 1, "m": 1, "T": 1, "coefficients": {"Zed": {"type": "constant", "value": [[1]]}}},
     "unknown coefficients"),
])
def test_schema_errors(data, msg):
    with pytest.raises(ModelError, match=msg):
        model_from_dict(data)


def test_reduced_coefficients():
    red = reduce(scalar_game(Qbar=2.0, R=1.0, Pbar=1.0))
    assert red.Qbar_cal(0.3)[0, 0] == 2.0
    assert red.Pbar_cal(0.3)[0, 0] == 0.0


def test_reduced_matches_products_pointwise(rng):
    from conftest import random_game

    m = random_game(rng)
    ts = TimeGrid(1.0, 20).times
    c, red = m.coeffs(ts), m.reduced(ts)
    assert np.array_equal(red.Qbar_cal, c.Qbar @ (np.eye(2) - c.S))


def test_counterexample_mean_weights_vanish():
    m = load_model(_resolve_model("counterexample"))
    red = m.reduced(np.linspace(0, m.T, 4))
    assert np.allclose(red.Pbar_cal, 0) and np.allclose(red.Qbar_cal, 0)


def test_convexity_margins():
    m = scalar_game(Qbar=1.0, Pbar=1.0, delta=0.1)
    rep = validate_convexity(m, TimeGrid(1.0, 50))
    assert rep.holds
    assert rep.scalars["margin_state"] == pytest.approx(1.9)
    assert rep.scalars["margin_control"] == pytest.approx(0.4)


def test_convexity_fails_with_large_cross_term():
    m = scalar_game(Qbar=1.0, Pbar=1.0, N=2.0, delta=0.1)
    rep = validate_convexity(m, TimeGrid(1.0, 50))
    assert not rep.holds and rep.witness_t is not None


def test_convexity_fails_without_control():
    m = scalar_game(B=0.0)
    assert not validate_convexity(m, TimeGrid(1.0, 50)).holds
