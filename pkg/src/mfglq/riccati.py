"""Riccati equations (symmetric and non-symmetric) and the linear offset zeta."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import MatrixPath
from .ode_core import HalfGridRHS, rk4_integrate, time_derivative
from .spectral import hamiltonian_generator, mean_field_blocks

SINGULAR_RCOND = 1e-10


@dataclass
class RiccatiSolution:
    times: np.ndarray
    samples: np.ndarray  # (k, n, n); NaN where the solution does not exist
    terminal: np.ndarray
    blow_up: float | None = None
    residual_sup: float = 0.0
    min_rcond: float | None = None
    method: str = "direct"

    @property
    def path(self) -> MatrixPath:
        return MatrixPath.sampled(self.times, self.samples)

    @property
    def ok(self) -> bool:
        return self.blow_up is None


@dataclass
class OffsetSolution:
    times: np.ndarray
    samples: np.ndarray  # (k, n)
    terminal: np.ndarray


def _T(M):
    return np.swapaxes(M, -1, -2)


def half_grid(samples: np.ndarray) -> np.ndarray:
    """Interleave grid samples with cubic-interpolated midpoints (O(h^4))."""
    y = np.asarray(samples, dtype=float)
    n = y.shape[0] - 1
    mid = np.empty((n,) + y.shape[1:])
    if n >= 3:
        mid[1:-1] = (-y[:-3] + 9 * y[1:-2] + 9 * y[2:-1] - y[3:]) / 16
        mid[0] = (5 * y[0] + 15 * y[1] - 5 * y[2] + y[3]) / 16
        mid[-1] = (5 * y[-1] + 15 * y[-2] - 5 * y[-3] + y[-4]) / 16
    else:
        mid[:] = 0.5 * (y[:-1] + y[1:])
    out = np.empty((2 * n + 1,) + y.shape[1:])
    out[0::2] = y
    out[1::2] = mid
    return out


def riccati_rhs(X, L, R, G, H):
    """dX/dt for 0 = X' + X L + R X - X G X + H."""
    return -(X @ L + R @ X - X @ G @ X + H)


def _solve_backward(L, R, G, H, terminal, grid, symmetric: bool) -> RiccatiSolution:
    """Backward RK4 with coefficients tabulated on the half grid."""

    def rhs(i, X):
        return riccati_rhs(X, L[i], R[i], G[i], H[i])

    f = HalfGridRHS(grid.T, grid.t_start, grid.n_steps, lambda i, X: rhs(2 * grid.n_steps - i, X))
    path = rk4_integrate(f, terminal, grid.T, grid.t_start, grid.n_steps)
    samples = path.y[::-1].copy()
    samples[-1] = terminal
    if symmetric and path.ok:
        samples = 0.5 * (samples + _T(samples))
    sol = RiccatiSolution(grid.times, samples, np.array(terminal, dtype=float),
                          blow_up=path.blow_up, method="direct")
    sol.residual_sup = _residual(sol, L[::2], R[::2], G[::2], H[::2], grid.h)
    return sol


def _residual(sol, L, R, G, H, h) -> float:
    X = sol.samples
    good = np.all(np.isfinite(X), axis=(1, 2))
    if good.sum() < 5:
        return float("nan")
    first = int(np.argmax(good))
    X, L, R, G, H = (a[first:] for a in (X, L, R, G, H))
    dX = time_derivative(X, h)
    res = dX - riccati_rhs(X, L, R, G, H)
    return float(np.max(np.abs(res)))


def _xi_coefficients(model, ts):
    c = model.coeffs(ts)
    K = np.linalg.inv(c.P + c.Pbar)
    Nt = _T(c.N)
    L = c.A - c.B @ K @ Nt
    G = c.B @ K @ _T(c.B)
    H = c.Q + c.Qbar - c.N @ K @ Nt
    return L, _T(L), G, H


def solve_xi(model, grid) -> RiccatiSolution:
    """Xi: 0 = Xi' + Xi(A - B K N^T) + (A^T - N K B^T) Xi - Xi B K B^T Xi + Q + Qbar - N K N^T.

    K = (P + Pbar)^-1 and Xi_T = Q_T + Qbar_T.
    """
    L, R, G, H = _xi_coefficients(model, grid.half_times)
    return _solve_backward(L, R, G, H, model.QT + model.QbarT, grid, symmetric=True)


def solve_xi_b(model, grid) -> RiccatiSolution:
    """Riccati for the fluctuation part of the control problem (same structure as Xi)."""
    return solve_xi(model, grid)


def solve_gamma_bar(model, grid) -> RiccatiSolution:
    """Riccati for the mean part of the control problem."""
    ts = grid.half_times
    c = model.coeffs(ts)
    t = model.tilde(ts)
    Kt = np.linalg.inv(c.P + t.P_tilde)
    BB = c.B + c.Bbar
    At = c.A + c.Abar - BB @ Kt @ _T(t.N_tilde)
    G = BB @ Kt @ _T(BB)
    H = c.Q + t.Q_tilde - t.N_tilde @ Kt @ _T(t.N_tilde)
    return _solve_backward(At, _T(At), G, H, model.QT + model.QT_tilde, grid, symmetric=True)


def _gamma_coefficients(model, ts):
    b = mean_field_blocks(model, ts)
    return b["M11"], b["M22"], -b["M12"], b["M21"]


def _orient(U):
    """Orthonormal rows spanning the same row space, with det of the change of basis > 0."""
    q, r = np.linalg.qr(U.T)
    return (q * np.sign(np.diag(r))).T


def _transition_rows(model, terminal, grid):
    """U_t = (terminal, -I) Phi(T, t) on the grid, up to a left factor per t.

    U' = -U M backward from T.  Rows are re-orthonormalized after every RK4
    step, which leaves -U2^-1 U1 unchanged and keeps U bounded where Phi(t, 0)
    itself would overflow.
    """
    n, k = model.n, grid.n_steps
    M = hamiltonian_generator(model, grid.half_times)
    h = -grid.h
    U = _orient(np.concatenate([terminal, -np.eye(n)], axis=1))
    out = np.empty((k + 1, n, 2 * n))
    out[k] = U
    for j in range(k, 0, -1):
        k1 = -U @ M[2 * j]
        k2 = -(U + 0.5 * h * k1) @ M[2 * j - 1]
        k3 = -(U + 0.5 * h * k2) @ M[2 * j - 1]
        k4 = -(U + h * k3) @ M[2 * j - 2]
        U = _orient(U + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        out[j - 1] = U
    return out


def solve_gamma(model, grid, method: str = "fundamental") -> RiccatiSolution:
    """Non-symmetric Riccati Gamma with Gamma_T = Q_T + Qbar_cal_T.

    ``fundamental`` writes Gamma_t = -U2^-1 U1 with (U1, U2) the rows
    (Gamma_T, -I) Phi(T, t) of the 2n x 2n transition matrix and flags points
    where U2 is singular (reciprocal condition below 1e-10, or a sign change
    of its determinant between neighbouring grid points).
    """
    terminal = model.QT + model.QbarT_cal
    if method == "direct":
        L, R, G, H = _gamma_coefficients(model, grid.half_times)
        return _solve_backward(L, R, G, H, terminal, grid, symmetric=False)
    if method != "fundamental":
        raise ValueError(f"unknown method {method!r}")
    n = model.n
    U1, U2 = np.split(_transition_rows(model, terminal, grid), 2, axis=2)
    rcond = 1.0 / np.linalg.cond(U2)
    det = np.linalg.det(U2)
    singular = ~np.isfinite(rcond) | (rcond < SINGULAR_RCOND)
    flips = np.zeros_like(singular)
    flips[:-1] = np.sign(det[:-1]) != np.sign(det[1:])
    bad = singular | flips
    samples = np.full((grid.n_steps + 1, n, n), np.nan)
    blow_up = None
    start = 0
    if np.any(bad):
        last = int(np.max(np.nonzero(bad)[0]))
        blow_up = float(grid.times[last])
        start = last + 1
    if start <= grid.n_steps:
        samples[start:] = -np.linalg.solve(U2[start:], U1[start:])
    samples[-1] = terminal
    sol = RiccatiSolution(grid.times, samples, np.array(terminal), blow_up=blow_up,
                          min_rcond=float(np.nanmin(rcond)), method="fundamental")
    L, R, G, H = _gamma_coefficients(model, grid.times)
    sol.residual_sup = _residual(sol, L, R, G, H, grid.h)
    return sol


def solve_zeta(model, Xi: RiccatiSolution, z, w, grid) -> OffsetSolution:
    """Offset zeta of the adjoint p = Xi x + zeta for given mean-field inputs (z, w).

    0 = zeta' + (A^T - N K B^T - Xi B K B^T) zeta
        + [Xi (B K N^T Sbar + Abar) + N K N^T Sbar - Qbar S] z
        + [Xi (B K Pbar R + Bbar) + N K Pbar R - N Rbar] w,
    zeta_T = -Qbar_T S_T z_T, with K = (P + Pbar)^-1.
    """
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    k = grid.n_steps + 1
    if z.shape[0] != k or w.shape[0] != k or Xi.samples.shape[0] != k:
        raise ValueError("grid mismatch between Xi, z, w and the time grid")
    ts = grid.half_times
    c = model.coeffs(ts)
    K = np.linalg.inv(c.P + c.Pbar)
    X = half_grid(Xi.samples)
    zh, wh = half_grid(z), half_grid(w)
    Bt, Nt = _T(c.B), _T(c.N)
    Mz = _T(c.A) - c.N @ K @ Bt - X @ c.B @ K @ Bt
    Cz = X @ (c.B @ K @ Nt @ c.Sbar + c.Abar) + c.N @ K @ Nt @ c.Sbar - c.Qbar @ c.S
    Cw = X @ (c.B @ K @ c.Pbar @ c.R + c.Bbar) + c.N @ K @ c.Pbar @ c.R - c.N @ c.Rbar
    src = (Cz @ zh[:, :, None])[:, :, 0] + (Cw @ wh[:, :, None])[:, :, 0]
    terminal = -model.QbarT @ model.ST @ z[-1]
    n2 = 2 * grid.n_steps
    f = HalfGridRHS(grid.T, grid.t_start, grid.n_steps,
                    lambda i, y: -(Mz[n2 - i] @ y + src[n2 - i]))
    path = rk4_integrate(f, terminal, grid.T, grid.t_start, grid.n_steps)
    samples = path.y[::-1].copy()
    samples[-1] = terminal
    return OffsetSolution(grid.times, samples, terminal)


def write_matrix_csv(path, times, blocks: dict) -> None:
    """One row per time; columns t, then each named block flattened row-major."""
    header = ["t"]
    cols = [np.asarray(times)[:, None]]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 2:
            header += [f"{name}_{i}" for i in range(arr.shape[1])]
            cols.append(arr)
        else:
            r, c = arr.shape[1:]
            header += [f"{name}_{i}_{j}" for i in range(r) for j in range(c)]
            cols.append(arr.reshape(arr.shape[0], -1))
    data = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
