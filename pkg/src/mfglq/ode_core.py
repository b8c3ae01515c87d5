"""Fixed-step classical RK4 and state-transition matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

BLOW_UP = 1e12


@dataclass
class ODEPath:
    t: np.ndarray
    y: np.ndarray
    blow_up: float | None = None  # last good time before divergence

    @property
    def ok(self) -> bool:
        return self.blow_up is None


def rk4_integrate(f: Callable[[float, np.ndarray], np.ndarray], y0, t0: float, t1: float,
                  n_steps: int) -> ODEPath:
    """Integrate dy/dt = f(t, y) from t0 to t1 (t1 < t0 runs backward).

    Samples are returned in integration order.  If a component exceeds
    1e12 in magnitude or becomes NaN the run stops; the remaining samples
    are NaN and ``blow_up`` holds the last good time.
    """
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial value is not finite")
    ts = np.linspace(t0, t1, n_steps + 1)
    h = (t1 - t0) / n_steps
    out = np.full((n_steps + 1,) + y.shape, np.nan)
    out[0] = y
    for k in range(n_steps):
        t = ts[k]
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(ts[k + 1], y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.abs(y) <= BLOW_UP):
            return ODEPath(ts, out, blow_up=float(t))
        out[k + 1] = y
    return ODEPath(ts, out)


class HalfGridRHS:
    """Right-hand side backed by coefficients tabulated on grid points and midpoints.

    ``rhs(i, y)`` receives the half-grid index i (so grid point k is 2k).
    Avoids re-evaluating coefficient paths inside the RK4 loop.
    """

    def __init__(self, t0: float, t1: float, n_steps: int, rhs):
        self.t0 = t0
        self.hh = (t1 - t0) / (2 * n_steps)
        self.rhs = rhs

    def __call__(self, t, y):
        return self.rhs(int(round((t - self.t0) / self.hh)), y)


@dataclass
class FundamentalSolution:
    grid: object
    samples: np.ndarray  # Phi(t_k, 0)

    def __post_init__(self):
        self._inv = np.linalg.inv(self.samples)

    def index(self, t: float) -> int:
        k = int(round(t / self.grid.h))
        if not np.isclose(k * self.grid.h, t, rtol=0, atol=1e-9 * max(1.0, self.grid.T)):
            raise ValueError(f"t = {t} is not a grid point")
        return k

    def evaluate(self, t: float, s: float) -> np.ndarray:
        """Phi(t, s) = Phi(t, 0) Phi(s, 0)^-1."""
        return self.samples[self.index(t)] @ self._inv[self.index(s)]

    def from_index(self, k: int, j: int) -> np.ndarray:
        return self.samples[k] @ self._inv[j]


def fundamental_solution(M, grid) -> FundamentalSolution:
    """Phi(t, 0) of dPhi/dt = M(t) Phi on ``grid`` by RK4 (M a MatrixPath)."""
    gen = M.at(grid.half_times)
    d = gen.shape[1]
    rhs = HalfGridRHS(grid.t_start, grid.T, grid.n_steps, lambda i, Y: gen[i] @ Y)
    path = rk4_integrate(rhs, np.eye(d), grid.t_start, grid.T, grid.n_steps)
    if not path.ok:
        raise FloatingPointError(f"fundamental solution diverged at t = {path.blow_up:g}")
    rc = 1.0 / np.linalg.cond(path.y)
    if np.any(rc < 1e-15):
        raise np.linalg.LinAlgError("singular fundamental-solution sample")
    return FundamentalSolution(grid, path.y)


def time_derivative(y: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order finite-difference derivative of uniformly sampled data (axis 0)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 5:
        return np.gradient(y, h, axis=0)
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d
