import math

import numpy as np
import pytest

from mfglq.model import MatrixPath, TimeGrid
from mfglq.ode_core import fundamental_solution, rk4_integrate, time_derivative


def test_constant_rhs():
    p = rk4_integrate(lambda t, y: 0 * y, [3.0], 0, 1, 10)
    assert np.all(p.y == 3.0) and p.ok


def test_exponential_accuracy():
    p = rk4_integrate(lambda t, y: y, [1.0], 0, 1, 1000)
    assert abs(p.y[-1, 0] - math.e) < 1e-10


def test_blow_up_reported():
    p = rk4_integrate(lambda t, y: y * y, [2.0], 0, 1, 2000)
    assert not p.ok
    assert abs(p.blow_up - 0.5) <= 0.005


def test_order_four():
    errs = []
    for n in (20, 40, 80):
        p = rk4_integrate(lambda t, y: -2 * t * y, [1.0], 0, 2, n)
        errs.append(np.abs(p.y[:, 0] - np.exp(-p.t ** 2)).max())
    for a, b in zip(errs, errs[1:]):
        assert 12 <= a / b <= 20


def test_backward_forward_round_trip():
    M = np.array([[0.3, -1.0], [0.7, -0.2]])
    back = rk4_integrate(lambda t, y: M @ y, [1.0, 2.0], 1, 0, 500)
    fwd = rk4_integrate(lambda t, y: M @ y, back.y[-1], 0, 1, 500)
    assert np.abs(fwd.y[-1] - [1.0, 2.0]).max() < 1e-9


def test_fundamental_zero_and_nilpotent():
    g = TimeGrid(1.0, 100)
    F = fundamental_solution(MatrixPath.zeros(2, 2), g)
    assert np.allclose(F.evaluate(0.7, 0.2), np.eye(2))
    F = fundamental_solution(MatrixPath.constant([[0, 1], [0, 0]]), g)
    for k, t in enumerate(g.times):
        assert np.allclose(F.samples[k], [[1, t], [0, 1]], atol=1e-13)


def test_fundamental_scalar_and_cocycle():
    g = TimeGrid(1.0, 200)
    F = fundamental_solution(MatrixPath.constant([[-0.8]]), g)
    assert F.evaluate(0.9, 0.3)[0, 0] == pytest.approx(math.exp(-0.8 * 0.6), abs=1e-12)
    M = MatrixPath.sampled([0, 1], [[[0, 1], [-1, 0.2]], [[0.5, 1], [-2, 0]]])
    F = fundamental_solution(M, g)
    for k, j, i in [(200, 120, 10), (50, 30, 0), (180, 181, 3)]:
        assert np.abs(F.from_index(k, j) @ F.from_index(j, i) - F.from_index(k, i)).max() < 1e-8


def test_time_derivative_order():
    t = np.linspace(0, 1, 201)
    assert np.abs(time_derivative(np.sin(t), t[1]) - np.cos(t)).max() < 1e-8
