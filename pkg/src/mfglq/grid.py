"""Storage control on a power grid with common noise: coefficient ODEs and path simulation.

State (Q0, Q1, S): two mean-reverting consumption factors and the storage
level S, controlled through its rate v.  The common noise b moves Q0 and
Q1 for every agent; w is idiosyncratic and only drives Q1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import EMFTCModel, TimeGrid
from .ode_core import HalfGridRHS, rk4_integrate, time_derivative
from .riccati import half_grid
from .rng import generator, ordered_map


# ----------------------------------------------------------------- params

@dataclass
class GridParams:
    """All defaults are illustrative (unit scalars, p0 = 0.1, T = 1)."""

    alpha0: float = 1.0
    alpha1: float = 1.0
    gamma0: object = 1.0  # constant or {"times": [...], "values": [...]}
    gamma1: object = 1.0
    beta0: float = 1.0
    beta1: float = 1.0
    sigma: float = 1.0
    a: float = 1.0
    l: float = 1.0
    c: float = 1.0
    K0: float = 1.0
    K1: float = 1.0
    p0: float = 0.1
    p1: float = 1.0
    h0: float = 1.0
    h1: float = 1.0
    T: float = 1.0
    Q00: float = 1.0
    Q10: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.c + self.K1 > 0:
            raise ValueError("c + K1 must be positive")
        if not self.m > 0:
            raise ValueError("c + K1 + 2 p0 must be positive")

    @property
    def m(self) -> float:
        return self.c + self.K1 + 2 * self.p0

    @property
    def mc(self) -> float:
        return self.c + self.K1

    def gamma(self, which: int, ts) -> np.ndarray:
        g = self.gamma0 if which == 0 else self.gamma1
        ts = np.asarray(ts, float)
        if isinstance(g, dict):
            return np.interp(ts, g["times"], g["values"])
        return np.full(ts.shape, float(g))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GridParams":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown grid parameter(s): {', '.join(sorted(extra))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "GridParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ----------------------------------------------------------- coefficients

@dataclass
class GridCoefficients:
    times: np.ndarray
    lambda0_bar: np.ndarray
    Gamma0_bar: np.ndarray
    Gamma1_bar: np.ndarray
    nu_bar: np.ndarray
    q3_bar: np.ndarray
    lambda0: np.ndarray
    Gamma0: np.ndarray
    Gamma1: np.ndarray
    q3: np.ndarray
    residuals: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        names = ["lambda0_bar", "Gamma0_bar", "Gamma1_bar", "nu_bar", "q3_bar",
                 "lambda0", "Gamma0", "Gamma1", "q3"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(getattr(self, n)[k])) for n in names])


class GridBlowUp(RuntimeError):
    pass


def _backward(rhs_half, terminal, grid):
    """Backward RK4 for a scalar ODE y' = rhs(i, y) with half-grid index i."""
    f = HalfGridRHS(grid.t_start, grid.T, grid.n_steps, rhs_half)
    path = rk4_integrate(f, [terminal], grid.T, grid.t_start, grid.n_steps)
    return path.y[::-1, 0].copy(), path.blow_up


def analytic_riccati(ts, a: float, m: float, h0: float, T: float) -> np.ndarray:
    """Solution of y' = y^2/m - a, y(T) = h0 (a > 0, h0 >= 0)."""
    s = T - np.asarray(ts, float)
    if a == 0:
        return h0 / (1 + h0 * s / m)
    k = math.sqrt(a * m)
    th = np.tanh(k * s / m)
    return k * (h0 + k * th) / (k + h0 * th)


def solve_grid_coefficients(params: GridParams, grid: TimeGrid) -> GridCoefficients:
    """Backward RK4 through the cascade: Riccati, then the linear equations fed by it."""
    p = params
    ts = grid.times
    hs = grid.half_times
    m, mc = p.m, p.mc

    def riccati(mass):
        y, bu = _backward(lambda i, y: y * y / mass - p.a, p.h0, grid)
        if bu is not None:
            raise GridBlowUp(f"Riccati coefficient blows up at t = {bu:g} (needs a >= 0, h0 >= 0)")
        return y

    def linear(rate, source, terminal):
        return _backward(lambda i, y: rate[i] * y - source[i], terminal, grid)[0]

    lam_b = riccati(m)
    lb = half_grid(lam_b)
    G0b = linear(p.alpha0 + lb / m, 2 * p.p0 * lb / m, 0.0)
    G1b = linear(p.alpha1 + lb / m, lb * (p.K1 + 2 * p.p0) / m, 0.0)
    g0, g1 = p.gamma(0, hs), p.gamma(1, hs)
    src_nu = (-lb * p.p1 / m + p.alpha0 * g0 * half_grid(G0b)
              + p.alpha1 * g1 * half_grid(G1b) + p.l)
    nu_b = linear(lb / m, src_nu, p.h1)

    lam = lam_b.copy() if p.p0 == 0 else riccati(mc)
    lt = half_grid(lam)
    G0 = linear(p.alpha0 + lt / mc, np.zeros_like(lt), 0.0)
    G1 = linear(p.alpha1 + lt / mc, lt * p.K1 / mc, 0.0)

    co = GridCoefficients(ts, lam_b, G0b, G1b, nu_b, -p.beta0 * G0b - p.beta1 * G1b,
                          lam, G0, G1, -p.sigma * G1)
    co.residuals = coefficient_residuals(p, co)
    return co


def coefficient_residuals(p: GridParams, co: GridCoefficients) -> dict:
    """sup |lhs| of each coefficient ODE by fourth-order differencing."""
    h = co.times[1] - co.times[0]
    d = lambda y: time_derivative(y, h)  # noqa: E731
    m, mc = p.m, p.mc
    lb, l0 = co.lambda0_bar, co.lambda0
    g0, g1 = p.gamma(0, co.times), p.gamma(1, co.times)
    res = {
        "lambda0_bar": d(lb) + p.a - lb ** 2 / m,
        "Gamma0_bar": d(co.Gamma0_bar) - (p.alpha0 + lb / m) * co.Gamma0_bar + 2 * p.p0 * lb / m,
        "Gamma1_bar": d(co.Gamma1_bar) - (p.alpha1 + lb / m) * co.Gamma1_bar
        + lb * (p.K1 + 2 * p.p0) / m,
        "nu_bar": d(co.nu_bar) - lb / m * co.nu_bar - lb * p.p1 / m
        + p.alpha0 * g0 * co.Gamma0_bar + p.alpha1 * g1 * co.Gamma1_bar + p.l,
        "lambda0": d(l0) + p.a - l0 ** 2 / mc,
        "Gamma0": d(co.Gamma0) - (p.alpha0 + l0 / mc) * co.Gamma0,
        "Gamma1": d(co.Gamma1) - (p.alpha1 + l0 / mc) * co.Gamma1 + l0 * p.K1 / mc,
    }
    return {k: float(np.max(np.abs(v))) for k, v in res.items()}


# ------------------------------------------------------------- simulation

@dataclass
class GridPaths:
    """Arrays are (n_paths, k) unless noted; bar quantities are per cohort (n_cohorts, k)."""

    times: np.ndarray
    cohort_size: int
    Q0: np.ndarray
    Q1: np.ndarray
    S: np.ndarray
    v: np.ndarray
    Q0_bar: np.ndarray
    Q1_bar: np.ndarray
    S_bar: np.ndarray
    v_bar: np.ndarray
    S_tilde: np.ndarray

    @property
    def n_cohorts(self) -> int:
        return self.S_bar.shape[0]

    def cohort_check(self) -> dict:
        """Cohort average of S against that cohort's S_bar, in units of std error."""
        k = self.cohort_size
        S = self.S.reshape(self.n_cohorts, k, -1)
        mean = S.mean(1)
        se = S.std(1, ddof=1) / math.sqrt(k) if k > 1 else np.zeros_like(mean)
        err = np.abs(mean - self.S_bar).max(1)
        env = se.max(1)
        return {"max_abs_error": err.tolist(), "max_std_err": env.tolist(),
                "within_3se": bool(np.all(err <= 3 * env + 1e-14))}

    def write_csv(self, path, max_paths: int = 10) -> None:
        k = min(max_paths, self.S.shape[0])
        header = ["t", "Q0_bar", "Q1_bar", "S_bar", "v_bar"]
        for j in range(k):
            header += [f"Q0_{j}", f"Q1_{j}", f"S_{j}", f"v_{j}"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, t in enumerate(self.times):
                row = [t, self.Q0_bar[0, i], self.Q1_bar[0, i], self.S_bar[0, i], self.v_bar[0, i]]
                for j in range(k):
                    row += [self.Q0[j, i], self.Q1[j, i], self.S[j, i], self.v[j, i]]
                w.writerow([repr(float(x)) for x in row])


def _bar_drift(p, co_half, g0, g1):
    """Right-hand side of the noise-free conditional-mean system (Q0, Q1, S)."""
    lb, G0, G1, nu = co_half

    def f(i, y):
        q0, q1, s = y
        phi = lb[i] * s + G0[i] * q0 + G1[i] * q1 + nu[i]
        v = -(phi - 2 * p.p0 * q0 - (2 * p.p0 + p.K1) * q1 + p.p1) / p.m
        return np.array([-p.alpha0 * (q0 - g0[i]), -p.alpha1 * (q1 - g1[i]), v])

    return f


def bar_control(p: GridParams, co: GridCoefficients, q0, q1, s):
    phi = co.lambda0_bar * s + co.Gamma0_bar * q0 + co.Gamma1_bar * q1 + co.nu_bar
    return -(phi - 2 * p.p0 * q0 - (2 * p.p0 + p.K1) * q1 + p.p1) / p.m


def deterministic_bar_path(p: GridParams, co: GridCoefficients) -> np.ndarray:
    """(Q0, Q1, S) of the conditional-mean system with the common noise switched off (RK4)."""
    ts = co.times
    steps = ts.size - 1
    hs = np.linspace(ts[0], ts[-1], 2 * steps + 1)
    halves = [half_grid(y) for y in (co.lambda0_bar, co.Gamma0_bar, co.Gamma1_bar, co.nu_bar)]
    f = _bar_drift(p, halves, p.gamma(0, hs), p.gamma(1, hs))
    g = HalfGridRHS(ts[0], ts[-1], steps, f)
    return rk4_integrate(g, [p.Q00, p.Q10, 0.0], ts[0], ts[-1], steps).y


def simulate_grid(p: GridParams, co: GridCoefficients, n_paths: int, seed: int = 0,
                  cohort_size: int = 100) -> GridPaths:
    """Simulate n_paths agents in cohorts that share one common-noise path.

    Each state is split into its noise-free part (RK4) plus zero-mean
    noise-driven parts (Euler-Maruyama): the common-noise response of the
    conditional means and the idiosyncratic response of the fluctuations.
    With all noise off every path equals the deterministic solution.
    """
    if n_paths % cohort_size:
        raise ValueError("n_paths must be a multiple of cohort_size")
    ts = co.times
    h = ts[1] - ts[0]
    steps = ts.size - 1
    n_coh = n_paths // cohort_size
    det = deterministic_bar_path(p, co)
    m, mc = p.m, p.mc

    def cohort(j):
        db = generator(seed, j, stream=3).standard_normal(steps) * math.sqrt(h)
        nb = np.zeros((steps + 1, 3))  # common-noise response of (Q0, Q1, S) bar
        for k in range(steps):
            n0, n1, ns = nb[k]
            dv = -(co.lambda0_bar[k] * ns + (co.Gamma0_bar[k] - 2 * p.p0) * n0
                   + (co.Gamma1_bar[k] - 2 * p.p0 - p.K1) * n1) / m
            nb[k + 1] = (n0 - h * p.alpha0 * n0 + p.beta0 * db[k],
                         n1 - h * p.alpha1 * n1 + p.beta1 * db[k],
                         ns + h * dv)
        bar = det + nb
        vb = bar_control(p, co, bar[:, 0], bar[:, 1], bar[:, 2])
        first = j * cohort_size
        dw = np.stack([generator(seed, first + i, stream=4).standard_normal(steps)
                       for i in range(cohort_size)]) * math.sqrt(h)
        q1t = np.zeros((cohort_size, steps + 1))
        st = np.zeros((cohort_size, steps + 1))
        vt = np.zeros((cohort_size, steps + 1))
        for k in range(steps + 1):
            vt[:, k] = ((p.K1 - co.Gamma1[k]) * q1t[:, k] - co.lambda0[k] * st[:, k]) / mc
            if k == steps:
                break
            q1t[:, k + 1] = q1t[:, k] - h * p.alpha1 * q1t[:, k] + p.sigma * dw[:, k]
            st[:, k + 1] = st[:, k] + h * vt[:, k]
        return bar, vb, q1t, st, vt

    parts = ordered_map(cohort, range(n_coh))
    bar = np.stack([x[0] for x in parts])
    vb = np.stack([x[1] for x in parts])
    q1t = np.concatenate([x[2] for x in parts])
    st = np.concatenate([x[3] for x in parts])
    vt = np.concatenate([x[4] for x in parts])
    rep = lambda a: np.repeat(a, cohort_size, axis=0)  # noqa: E731
    return GridPaths(ts, cohort_size,
                     Q0=rep(bar[:, :, 0]), Q1=rep(bar[:, :, 1]) + q1t,
                     S=rep(bar[:, :, 2]) + st, v=rep(vb) + vt,
                     Q0_bar=bar[:, :, 0], Q1_bar=bar[:, :, 1], S_bar=bar[:, :, 2], v_bar=vb,
                     S_tilde=st)


def cascade_residual(p: GridParams, co: GridCoefficients, paths: GridPaths) -> float:
    """sup |d phi_bar/dt + a S_bar + l| along the first cohort (meaningful with noise off)."""
    q0, q1, s = paths.Q0_bar[0], paths.Q1_bar[0], paths.S_bar[0]
    phi = co.lambda0_bar * s + co.Gamma0_bar * q0 + co.Gamma1_bar * q1 + co.nu_bar
    h = co.times[1] - co.times[0]
    return float(np.max(np.abs(time_derivative(phi, h) + p.a * s + p.l)))


# ----------------------------------------------- link to the control form

def storage_mftc_model(p: GridParams, delta: float = 1e-6) -> EMFTCModel:
    """Scalar control problem for the storage level with the same Riccati data.

    The fluctuation problem has control weight c + K1 and the mean problem
    c + K1 + 2 p0.  Splitting c + K1 evenly between P and Pbar and choosing R
    with (1 - R)^2 = 1 + 4 p0 / (c + K1) reproduces both weights, so the
    mean Riccati equals lambda0_bar and the fluctuation Riccati equals lambda0.
    """
    half = 0.5 * p.mc
    R = 1.0 - math.sqrt(1.0 + 4.0 * p.p0 / p.mc)
    one = np.eye(1)
    return EMFTCModel.build(1, 1, p.T, delta=delta, A=0 * one, B=one, Q=p.a * one,
                            P=half * one, Pbar=half * one, R=R * one, QT=p.h0 * one,
                            x0_mean=[0.0])
