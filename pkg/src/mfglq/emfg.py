"""Mean-field fixed point, equilibrium feedback and representative-agent simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .model import EMFGModel, MatrixPath, TimeGrid
from .ode_core import HalfGridRHS, fundamental_solution, rk4_integrate
from .riccati import RiccatiSolution, solve_gamma, solve_xi, solve_zeta, write_matrix_csv
from .rng import chunks, normals, ordered_map, sqrt_psd
from .spectral import hamiltonian_generator, mean_field_blocks

SINGULAR_RCOND = 1e-10


class SolvabilityError(RuntimeError):
    """The mean-field system has no (unique) solution at this horizon."""


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


@dataclass
class FBODESolution:
    times: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    upsilon: np.ndarray
    terminal_residual: float
    method: str
    gamma: RiccatiSolution | None = None
    rcond: float | None = None


def _upsilon(model, ts, xi, eta):
    b = mean_field_blocks(model, ts)
    return -_mv(b["Kc"], _mv(b["r"].Sbar_cal, xi) + _mv(_T(b["c"].B), eta))


def solve_mean_field(model: EMFGModel, grid: TimeGrid, method: str = "gamma",
                     rcond_min: float = SINGULAR_RCOND) -> FBODESolution:
    n = model.n
    ts = grid.times
    QTc = model.QT + model.QbarT_cal
    x0 = np.array(model.x0_mean, dtype=float)
    if method == "gamma":
        fine = solve_gamma(model, grid.refined(2), "fundamental")
        if not fine.ok:
            raise SolvabilityError(f"Gamma does not exist on [0, T]: singular at t = {fine.blow_up:g}")
        Gh = fine.samples  # on the half grid of ``grid``
        b = mean_field_blocks(model, grid.half_times)
        closed = b["M11"] + b["M12"] @ Gh
        f = HalfGridRHS(grid.t_start, grid.T, grid.n_steps, lambda i, y: closed[i] @ y)
        xi = rk4_integrate(f, x0, grid.t_start, grid.T, grid.n_steps).y
        gamma = RiccatiSolution(ts, Gh[::2].copy(), fine.terminal, fine.blow_up,
                                fine.residual_sup, fine.min_rcond, fine.method)
        eta = _mv(gamma.samples, xi)
        rcond = fine.min_rcond
    elif method == "shooting":
        gen = MatrixPath.derived((2 * n, 2 * n), lambda s: hamiltonian_generator(model, s))
        fs = fundamental_solution(gen, grid)
        PhiT = fs.samples[-1]
        E = np.concatenate([QTc, -np.eye(n)], axis=1) @ PhiT
        U1, U2 = E[:, :n], E[:, n:]
        rcond = float(1.0 / np.linalg.cond(U2))
        if not np.isfinite(rcond) or rcond < rcond_min:
            raise SolvabilityError(
                f"non-existence or non-uniqueness at this horizon (shooting rcond = {rcond:.3g})")
        eta0 = np.linalg.solve(-U2, U1 @ x0)
        y = _mv(fs.samples, np.concatenate([x0, eta0]))
        xi, eta = y[:, :n], y[:, n:]
        gamma = None
    else:
        raise ValueError(f"unknown method {method!r}")
    ups = _upsilon(model, ts, xi, eta)
    res = float(np.linalg.norm(eta[-1] - QTc @ xi[-1]))
    return FBODESolution(ts, xi, eta, ups, res, method, gamma, rcond)


@dataclass
class EquilibriumFeedback:
    """v(t, x) = F_t x + G_t xi_t + g_t."""

    times: np.ndarray
    F: np.ndarray
    G: np.ndarray
    g: np.ndarray
    Xi: RiccatiSolution
    zeta: np.ndarray
    xi: np.ndarray
    eta: np.ndarray

    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        """Control at grid index k for states x of shape (..., n)."""
        return x @ self.F[k].T + (self.G[k] @ self.xi[k] + self.g[k])


def build_feedback(model: EMFGModel, Xi: RiccatiSolution, zeta, fbode: FBODESolution) -> EquilibriumFeedback:
    ts = fbode.times
    zeta = getattr(zeta, "samples", zeta)
    if not (len(Xi.times) == len(zeta) == len(ts)):
        raise ValueError("Xi, zeta and the fixed point must share a grid")
    b = mean_field_blocks(model, ts)
    c, Kc = b["c"], b["Kc"]
    K = np.linalg.inv(c.P + c.Pbar)
    Bt, Nt = _T(c.B), _T(c.N)
    PRK = c.Pbar @ c.R @ Kc
    F = -K @ (Nt + Bt @ Xi.samples)
    G = -K @ (PRK @ b["r"].Sbar_cal - Nt @ c.Sbar)
    g = -_mv(K, _mv(Bt, zeta) + _mv(PRK @ Bt, fbode.eta))
    return EquilibriumFeedback(ts, F, G, g, Xi, zeta, fbode.xi, fbode.eta)


@dataclass
class EMFGSolution:
    fbode: FBODESolution
    Xi: RiccatiSolution
    zeta: object
    feedback: EquilibriumFeedback


def solve_emfg(model: EMFGModel, grid: TimeGrid, method: str = "gamma",
               rcond_min: float = SINGULAR_RCOND) -> EMFGSolution:
    """Fixed point, Xi, zeta and the equilibrium feedback in one call."""
    fb = solve_mean_field(model, grid, method, rcond_min)
    Xi = solve_xi(model, grid)
    if not Xi.ok:
        raise SolvabilityError(f"Xi blows up at t = {Xi.blow_up:g}")
    zeta = solve_zeta(model, Xi, fb.xi, fb.upsilon, grid)
    return EMFGSolution(fb, Xi, zeta, build_feedback(model, Xi, zeta, fb))


@dataclass
class SimulationResult:
    n_paths: int
    seed: int
    times: np.ndarray
    mean: np.ndarray
    std_err: np.ndarray
    fixed_point_residual: float
    max_error_ratio: float
    paths: np.ndarray | None = field(default=None, repr=False)


def _euler_paths(model, feedback, fbode, seed, start, count, keep):
    # Euler-Maruyama on the deviation d = x - xi.  The mean xi comes from
    # the RK4 fixed point, so the scheme carries no O(h) bias in the mean
    # and sigma = 0 reproduces xi exactly.
    ts = fbode.times
    h = ts[1] - ts[0]
    n, steps = model.n, ts.size - 1
    c = model.coeffs(ts)
    z = normals(seed, start, count, (steps + 1, n))
    d = z[:, 0] @ sqrt_psd(model.x0_cov).T
    dW = z[:, 1:] * np.sqrt(h)
    total = np.zeros((steps + 1, n))
    total2 = np.zeros((steps + 1, n))
    stored = np.empty((count, steps + 1, n)) if keep else None
    closed = c.A + c.B @ feedback.F
    gap = _mv(c.B, _mv(feedback.F + feedback.G, fbode.xi) + feedback.g - fbode.upsilon)
    for k in range(steps + 1):
        x = fbode.xi[k] + d
        total[k] = x.sum(axis=0)
        total2[k] = (x * x).sum(axis=0)
        if keep:
            stored[:, k] = x
        if k == steps:
            break
        d = d + h * (d @ closed[k].T + gap[k]) + dW[:, k] @ c.sigma[k].T
    return total, total2, stored


def simulate_representative(model: EMFGModel, feedback: EquilibriumFeedback, fbode: FBODESolution,
                            n_paths: int, seed: int = 0, keep_paths: int = 0) -> SimulationResult:
    """Simulate the representative agent under z = xi, w = upsilon on the grid of ``fbode``."""
    jobs = chunks(n_paths)
    parts = ordered_map(
        lambda job: _euler_paths(model, feedback, fbode, seed, job[0], job[1],
                                 keep=job[0] < keep_paths), jobs)
    total = sum(p[0] for p in parts)
    total2 = sum(p[1] for p in parts)
    mean = total / n_paths
    var = np.clip(total2 / n_paths - mean ** 2, 0.0, None) * n_paths / max(n_paths - 1, 1)
    se = np.sqrt(var / n_paths)
    err = np.linalg.norm(mean - fbode.xi, axis=1)
    env = np.linalg.norm(se, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, err / env, np.where(err > 1e-12, np.inf, 0.0))
    kept = None
    if keep_paths:
        kept = np.concatenate([p[2] for p in parts if p[2] is not None])[:keep_paths]
    return SimulationResult(n_paths, seed, fbode.times, mean, se, float(err.max()),
                            float(ratio.max()), kept)


# ------------------------------------------------------------ counterexample

COUNTEREXAMPLE_GENERATOR = np.array([
    [-6.24, -4.47, -0.5, -1.1],
    [-7.98, 1.38, -1.1, -3.2],
    [1.176, -0.566, -2.38, -1.66],
    [-7.062, -2.152, -3.37, -2.08],
])
COUNTEREXAMPLE_Q = np.array([[2.1, -0.3], [-0.3, 0.2]])
COUNTEREXAMPLE_SBAR_CAL = np.array([[1.0, -0.2], [1.4, 0.7]])


def counterexample_phis(T: float, grid_steps: int = 2000, generator=None, QT=None) -> tuple:
    """(Phi1, Phi2) = det of (Q, -I) Phi(T, 0) restricted to the eta / xi columns."""
    gen = COUNTEREXAMPLE_GENERATOR if generator is None else generator
    QT = COUNTEREXAMPLE_Q if QT is None else QT
    n = QT.shape[0]
    fs = fundamental_solution(MatrixPath.constant(gen), TimeGrid(T, grid_steps))
    U = np.concatenate([QT, -np.eye(n)], axis=1) @ fs.samples[-1]
    return float(np.linalg.det(U[:, n:])), float(np.linalg.det(U[:, :n]))


@dataclass
class ScanResult:
    T: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray

    def sign_changes(self, which: str = "phi1") -> list:
        v = getattr(self, which)
        idx = np.nonzero(np.sign(v[:-1]) != np.sign(v[1:]))[0]
        return [(float(self.T[i]), float(self.T[i + 1])) for i in idx]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "Phi1", "Phi2"])
            for row in zip(self.T, self.phi1, self.phi2):
                w.writerow([repr(float(v)) for v in row])


def counterexample_scan(t_min: float, t_max: float, n_horizons: int, grid_steps: int = 2000) -> ScanResult:
    Ts = np.linspace(t_min, t_max, n_horizons)
    if np.any(Ts <= 0) or np.any(np.diff(Ts) <= 0):
        raise ValueError("horizons must be positive and ascending")
    vals = np.array([counterexample_phis(T, grid_steps) for T in Ts])
    return ScanResult(Ts, vals[:, 0], vals[:, 1])


def counterexample_root(lo: float = 0.3, hi: float = 0.31, grid_steps: int = 2000) -> float:
    """Horizon T0 where Phi1 vanishes."""
    return brentq(lambda T: counterexample_phis(T, grid_steps)[0], lo, hi, xtol=1e-14)


def counterexample_model(T: float = 0.29, c: float = 0.1, x0_mean=(1.0, 1.0)) -> EMFGModel:
    """A two-dimensional game whose mean-field generator is the constant
    counterexample matrix, with S = R = B = I and Bbar = 0.

    With B = I and Pbar_cal = 0 the blocks read M11 = A + Abar - P^-1 Sbar_cal,
    M12 = -P^-1, M21 = Q - Rbar_cal P^-1 Sbar_cal, M22 = A^T - Rbar_cal P^-1;
    the generator of (xi, eta) is [[M11, M12], [-M21, -M22]].  The
    cross-weight N = cI is small so that the model stays convex.
    """
    G = COUNTEREXAMPLE_GENERATOR
    UL, UR, LL, LR = G[:2, :2], G[:2, 2:], G[2:, :2], G[2:, 2:]
    Q = COUNTEREXAMPLE_Q
    Pinv = -UR
    P = np.linalg.inv(Pinv)
    P = 0.5 * (P + P.T)
    Sc = COUNTEREXAMPLE_SBAR_CAL
    Rc = (Q + LL) @ np.linalg.solve(Sc, P)
    A = (Rc @ Pinv - LR).T
    Abar = UL + Pinv @ Sc - A
    I = np.eye(2)
    return EMFGModel.build(
        2, 2, T, A=A, B=I, Abar=Abar, Q=Q, P=P, Qbar=I, S=I, R=I,
        N=c * I, Sbar=I - Sc / c, Rbar=I - Rc / c,
        QT=Q, ST=I, x0_mean=x0_mean)


def write_fbode_csv(path, fb: FBODESolution) -> None:
    write_matrix_csv(path, fb.times, {"xi": fb.xi, "eta": fb.eta, "upsilon": fb.upsilon})


def write_feedback_csv(path, fbk: EquilibriumFeedback) -> None:
    write_matrix_csv(path, fbk.times, {"F": fbk.F, "G": fbk.G, "g": fbk.g})
