"""Extended mean-field-type control: closed-form solution and optimality checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import EMFTCModel, TimeGrid
from .ode_core import HalfGridRHS, rk4_integrate
from .riccati import RiccatiSolution, solve_gamma_bar, solve_xi_b, write_matrix_csv
from .rng import chunks, generator, normals, ordered_map, sqrt_psd
from .spectral import ConditionReport, _inv_checked, _lmin

PSD_TOL = 1e-10


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def check_mftc_conditions(model: EMFTCModel, grid: TimeGrid) -> ConditionReport:
    """The two convexity pairs (fluctuation and mean problem) at every grid point."""
    ts = grid.times
    c = model.coeffs(ts)
    t = model.tilde(ts)
    K = _inv_checked(c.P + c.Pbar, ts, "P+Pbar")
    Kt = _inv_checked(c.P + t.P_tilde, ts, "P+P_tilde")
    BB = c.B + c.Bbar
    margins = {
        "fluct_state": _lmin(c.Q + c.Qbar - c.N @ K @ _T(c.N)),
        "fluct_control": _lmin(c.B @ K @ _T(c.B)) - model.delta,
        "mean_state": _lmin(c.Q + t.Q_tilde - t.N_tilde @ Kt @ _T(t.N_tilde)),
        "mean_control": _lmin(BB @ Kt @ _T(BB)) - model.delta,
    }
    ok = {
        "fluct_state": margins["fluct_state"] >= -PSD_TOL,
        "fluct_control": margins["fluct_control"] > 0,
        "mean_state": margins["mean_state"] >= -PSD_TOL,
        "mean_control": margins["mean_control"] > 0,
    }
    holds = all(bool(np.all(v)) for v in ok.values())
    scalars = {f"margin_{k}": float(v.min()) for k, v in margins.items()}
    for k in ok:
        scalars[f"{k}_holds"] = bool(np.all(ok[k]))
    scalars["terminal_fluct_lmin"] = float(_lmin(model.QT + model.QbarT))
    scalars["terminal_mean_lmin"] = float(_lmin(model.QT + model.QT_tilde))
    scalars["delta"] = model.delta
    witness = None
    if not holds:
        worst = min((k for k in ok if not np.all(ok[k])), key=lambda k: margins[k].min())
        witness = float(ts[int(np.argmin(margins[worst]))])
    return ConditionReport("C5", holds, scalars, witness)


@dataclass
class MFTCSolution:
    """v(t, x) = K_dev_t (x - xbar_t) + vbar_t with vbar_t = K_mean_t xbar_t."""

    times: np.ndarray
    gamma_bar: RiccatiSolution
    xi_b: RiccatiSolution
    xbar: np.ndarray
    pbar: np.ndarray
    vbar: np.ndarray
    K_dev: np.ndarray
    K_mean: np.ndarray

    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        return (x - self.xbar[k]) @ self.K_dev[k].T + self.vbar[k]


class RiccatiBlowUp(RuntimeError):
    pass


def solve_mftc(model: EMFTCModel, grid: TimeGrid) -> MFTCSolution:
    fine = solve_gamma_bar(model, grid.refined(2))
    xi_b = solve_xi_b(model, grid)
    for name, sol in (("Gamma_bar", fine), ("Xi_b", xi_b)):
        if not sol.ok:
            raise RiccatiBlowUp(f"{name} blows up at t = {sol.blow_up:g}")
    hs = grid.half_times
    c = model.coeffs(hs)
    t = model.tilde(hs)
    Kt = np.linalg.inv(c.P + t.P_tilde)
    BB = c.B + c.Bbar
    Gb = fine.samples
    K_mean = -Kt @ (_T(BB) @ Gb + _T(t.N_tilde))
    closed = c.A + c.Abar + BB @ K_mean
    f = HalfGridRHS(grid.t_start, grid.T, grid.n_steps, lambda i, y: closed[i] @ y)
    xbar = rk4_integrate(f, np.array(model.x0_mean, float), grid.t_start, grid.T, grid.n_steps).y

    cg = model.coeffs(grid.times)
    K = np.linalg.inv(cg.P + cg.Pbar)
    K_dev = -K @ (_T(cg.B) @ xi_b.samples + _T(cg.N))
    gamma_bar = RiccatiSolution(grid.times, Gb[::2].copy(), fine.terminal, None,
                                fine.residual_sup, None, fine.method)
    K_mean = K_mean[::2]
    return MFTCSolution(grid.times, gamma_bar, xi_b, xbar, _mv(gamma_bar.samples, xbar),
                        _mv(K_mean, xbar), K_dev, K_mean)


# ------------------------------------------------------------- simulation

def _deviation_chunk(model, sol, seed, start, count, stream=0):
    """Euler-Maruyama for x - xbar, which solves dd = (A + B K_dev) d dt + sigma dW."""
    ts = sol.times
    h = ts[1] - ts[0]
    n, steps = model.n, ts.size - 1
    c = model.coeffs(ts)
    z = normals(seed, start, count, (steps + 1, n), stream)
    out = np.empty((count, steps + 1, n))
    out[:, 0] = z[:, 0] @ sqrt_psd(model.x0_cov).T
    closed = c.A + c.B @ sol.K_dev
    sq = np.sqrt(h)
    for k in range(steps):
        d = out[:, k]
        out[:, k + 1] = d + h * d @ closed[k].T + sq * z[:, k + 1] @ c.sigma[k].T
    return out


def simulate_mftc(model: EMFTCModel, sol: MFTCSolution, n_paths: int, seed: int = 0,
                  keep_paths: int = 0):
    """MC mean and std error of the optimal state; residual against xbar."""
    from .emfg import SimulationResult

    def job(j):
        d = _deviation_chunk(model, sol, seed, j[0], j[1])
        x = sol.xbar + d
        return x.sum(0), (x * x).sum(0), (x if j[0] < keep_paths else None)

    parts = ordered_map(job, chunks(n_paths))
    mean = sum(p[0] for p in parts) / n_paths
    var = np.clip(sum(p[1] for p in parts) / n_paths - mean ** 2, 0, None) * n_paths / max(n_paths - 1, 1)
    se = np.sqrt(var / n_paths)
    err = np.linalg.norm(mean - sol.xbar, axis=1)
    env = np.linalg.norm(se, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, err / env, np.where(err > 1e-12, np.inf, 0.0))
    kept = None
    if keep_paths:
        kept = np.concatenate([p[2] for p in parts if p[2] is not None])[:keep_paths]
    return SimulationResult(n_paths, seed, sol.times, mean, se, float(err.max()),
                            float(ratio.max()), kept)


def running_cost(c, x, v, xm, vm):
    """Integrand of the objective (with the 1/2) for states x (..., k, n), controls v."""
    def quad(a, M, b):
        return np.einsum("...ki,kij,...kj->...k", a, M, b)

    xs = x - _mv(c.S, xm)
    xsb = x - _mv(c.Sbar, xm)
    vrb = v - _mv(c.Rbar, vm)
    vr = v - _mv(c.R, vm)
    return 0.5 * (quad(x, c.Q, x) + quad(v, c.P, v) + quad(xs, c.Qbar, xs)
                  + 2 * quad(xsb, c.N, vrb) + quad(vr, c.Pbar, vr))


def terminal_cost(model, xT, xmT):
    xs = xT - model.ST @ xmT
    return 0.5 * (np.einsum("...i,ij,...j->...", xT, model.QT, xT)
                  + np.einsum("...i,ij,...j->...", xs, model.QbarT, xs))


def path_costs(model, ts, x, v_left, v_right, xm, vm_left, vm_right):
    """Per-path objective by the trapezoid rule.

    Controls may jump at grid points: step k uses v_left[k] at t_k and
    v_right[k+1] at t_{k+1}.  Mean paths xm, vm are supplied (not estimated).
    """
    c = model.coeffs(ts)
    h = ts[1] - ts[0]
    lo = running_cost(c, x, v_left, xm, vm_left)
    hi = running_cost(c, x, v_right, xm, vm_right)
    integral = 0.5 * h * (lo[..., :-1].sum(-1) + hi[..., 1:].sum(-1))
    return integral + terminal_cost(model, x[..., -1, :], xm[-1])


def mean_objective(model, sol: MFTCSolution, n_paths: int, seed: int = 0) -> tuple[float, float]:
    """MC estimate (mean, std error) of J at the optimal control."""
    vals = []
    for start, count in chunks(n_paths):
        d = _deviation_chunk(model, sol, seed, start, count)
        v = sol.vbar + _mv(sol.K_dev, d)
        vals.append(path_costs(model, sol.times, sol.xbar + d, v, v, sol.xbar, sol.vbar, sol.vbar))
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))


def decomposed_objective(model, sol: MFTCSolution) -> float:
    """Deterministic value of J at the optimum: mean part plus fluctuation part.

    The fluctuation covariance Sigma solves Sigma' = C Sigma + Sigma C^T + sigma sigma^T
    with C = A + B K_dev.
    """
    ts = sol.times
    c = model.coeffs(ts)
    h = ts[1] - ts[0]
    mean_run = running_cost(c, sol.xbar, sol.vbar, sol.xbar, sol.vbar)
    Cl = c.A + c.B @ sol.K_dev
    ss = c.sigma @ _T(c.sigma)
    Sig = np.empty((ts.size, model.n, model.n))
    Sig[0] = model.x0_cov
    for k in range(ts.size - 1):
        # Heun is enough here; the covariance is smooth and only feeds a diagnostic
        f0 = Cl[k] @ Sig[k] + Sig[k] @ Cl[k].T + ss[k]
        pred = Sig[k] + h * f0
        f1 = Cl[k + 1] @ pred + pred @ Cl[k + 1].T + ss[k + 1]
        Sig[k + 1] = Sig[k] + 0.5 * h * (f0 + f1)
    Wx = c.Q + c.Qbar
    Wv = _T(sol.K_dev) @ (c.P + c.Pbar) @ sol.K_dev
    Wc = c.N @ sol.K_dev
    fl = 0.5 * np.einsum("kij,kji->k", Wx + Wv + Wc + _T(Wc), Sig)
    run = mean_run + fl
    J = h * (run.sum() - 0.5 * (run[0] + run[-1]))
    J += terminal_cost(model, sol.xbar[-1], sol.xbar[-1])
    J += 0.5 * np.trace((model.QT + model.QbarT) @ Sig[-1])
    return float(J)


# ---------------------------------------------------------- gateaux test

def random_direction(model, grid, index: int, seed: int, pieces: int = 8) -> np.ndarray:
    """Piecewise-constant control path on ``pieces`` equal subintervals, unit L2 norm.

    Returns the per-step values (n_steps, m); grid.n_steps must be a multiple of ``pieces``.
    """
    if grid.n_steps % pieces:
        raise ValueError(f"n_steps must be a multiple of {pieces}")
    vals = generator(seed, index, stream=1).standard_normal((pieces, model.m))
    vals /= np.sqrt((vals ** 2).sum() * grid.T / pieces)
    return np.repeat(vals, grid.n_steps // pieces, axis=0)


def _direction_response(model, sol, w_steps):
    """x_w' = (A + Abar) x_w + (B + Bbar) w with x_w(0) = 0, exact per-step forcing."""
    ts = sol.times
    h = ts[1] - ts[0]
    hs = np.linspace(ts[0], ts[-1], 2 * ts.size - 1)
    c = model.coeffs(hs)
    M = c.A + c.Abar
    Bw = c.B + c.Bbar
    y = np.zeros((ts.size, model.n))
    for k in range(ts.size - 1):
        u = w_steps[k]
        i = 2 * k

        def f(j, x):
            return M[j] @ x + Bw[j] @ u

        k1 = f(i, y[k])
        k2 = f(i + 1, y[k] + 0.5 * h * k1)
        k3 = f(i + 1, y[k] + 0.5 * h * k2)
        k4 = f(i + 2, y[k] + h * k3)
        y[k + 1] = y[k] + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


@dataclass
class DirectionResult:
    index: int
    linear: float
    linear_se: float
    quadratic: float
    quadratic_se: float
    diffs: list
    diff_se: list

    @property
    def first_order_ok(self) -> bool:
        return abs(self.linear) <= 3 * self.linear_se + 1e-12


@dataclass
class GateauxReport:
    epsilons: list
    n_paths: int
    seed: int
    directions: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return all(d.first_order_ok and d.quadratic > 0
                   and all(x >= -3 * s for x, s in zip(d.diffs, d.diff_se))
                   for d in self.directions)

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons), "n_paths": self.n_paths, "seed": self.seed,
            "holds": self.holds,
            "directions": [dict(index=d.index, linear=d.linear, linear_se=d.linear_se,
                                quadratic=d.quadratic, quadratic_se=d.quadratic_se,
                                diffs=d.diffs, diff_se=d.diff_se,
                                first_order_ok=d.first_order_ok) for d in self.directions],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def gateaux_test(model: EMFTCModel, sol: MFTCSolution, n_directions: int = 10,
                 epsilons=(0.05, 0.1, 0.2), n_paths: int = 10000, seed: int = 0) -> GateauxReport:
    """Perturb the optimal control process by eps * w for deterministic directions w.

    Common random numbers: every eps and direction reuses the same optimal
    paths.  Per path the cost difference is fitted as a * eps + b * eps^2 by
    least squares; the report carries the MC mean and std error of a and b.
    """
    eps = np.asarray(epsilons, float)
    if np.any(eps == 0):
        raise ValueError("epsilons must be nonzero (the eps = 0 difference is identically 0)")
    ts = sol.times
    steps = ts.size - 1
    grid = TimeGrid(float(ts[-1] - ts[0]), steps, float(ts[0]))
    design = np.stack([eps, eps ** 2], axis=1)
    pinv = np.linalg.pinv(design)
    dirs = [random_direction(model, grid, j, seed) for j in range(n_directions)]
    resp = [_direction_response(model, sol, w) for w in dirs]

    def job(chunk):
        start, count = chunk
        d = _deviation_chunk(model, sol, seed, start, count)
        x0 = sol.xbar + d
        v0 = sol.vbar + _mv(sol.K_dev, d)
        base = path_costs(model, ts, x0, v0, v0, sol.xbar, sol.vbar, sol.vbar)
        out = []
        for w, xw in zip(dirs, resp):
            wl = np.concatenate([w, w[-1:]])
            wr = np.concatenate([w[:1], w])
            D = np.empty((len(eps), count))
            for i, e in enumerate(eps):
                xm = sol.xbar + e * xw
                D[i] = path_costs(model, ts, x0 + e * xw, v0 + e * wl, v0 + e * wr,
                                  xm, sol.vbar + e * wl, sol.vbar + e * wr) - base
            out.append(D)
        return out

    parts = ordered_map(job, chunks(n_paths))
    report = GateauxReport(list(map(float, eps)), n_paths, seed)
    for j in range(n_directions):
        D = np.concatenate([p[j] for p in parts], axis=1)
        coef = pinv @ D
        a, b = coef
        sq = np.sqrt(n_paths)
        report.directions.append(DirectionResult(
            j, float(a.mean()), float(a.std(ddof=1) / sq),
            float(b.mean()), float(b.std(ddof=1) / sq),
            [float(x) for x in D.mean(1)], [float(x) for x in D.std(1, ddof=1) / sq]))
    return report


def write_mftc_csv(path, sol: MFTCSolution) -> None:
    write_matrix_csv(path, sol.times, {"xbar": sol.xbar, "Gamma_bar": sol.gamma_bar.samples,
                                       "Xi_b": sol.xi_b.samples})
