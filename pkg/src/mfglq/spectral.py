"""Solvability conditions for the mean-field forward-backward system.

All sups/infs over time are taken over grid points.  The matrix norm is
the Frobenius formula sqrt(tr(A^T A)).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

SYM_TOL = 1e-10


@dataclass
class ConditionReport:
    theorem_id: str
    holds: bool
    scalars: dict = field(default_factory=dict)
    witness_t: float | None = None
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)

    def table(self) -> str:
        status = "holds" if self.holds else "FAILS"
        lines = [f"{self.theorem_id:<8} {status}"
                 + (f"  (worst t = {self.witness_t:.6g})" if self.witness_t is not None else "")]
        if self.note:
            lines.append(f"  {self.note}")
        for key, val in self.scalars.items():
            if isinstance(val, (bool, np.bool_)):
                lines.append(f"  {key:<28} {bool(val)}")
            elif isinstance(val, (int, float, np.floating)):
                lines.append(f"  {key:<28} {float(val): .6e}")
            else:
                lines.append(f"  {key:<28} {val}")
        return "\n".join(lines)


# ---------------------------------------------------------------- primitives

def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def fro(M: np.ndarray) -> np.ndarray:
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(np.asarray(M) ** 2, axis=(-2, -1)))


def eig_sym(M) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has NaN or infinite entries")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > SYM_TOL * scale:
        raise ValueError("eig_sym needs a symmetric matrix")
    return np.linalg.eigvalsh(sym(M))


def singular_values(M) -> np.ndarray:
    """Descending singular values."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has NaN or infinite entries")
    return np.linalg.svd(M, compute_uv=False)


def is_pd(M: np.ndarray) -> bool:
    lam = np.linalg.eigvalsh(sym(M))
    return bool(lam[0] > 1e-12 * max(1.0, abs(lam[-1])))


def sym_power(M: np.ndarray, p: float) -> np.ndarray:
    """M^p for symmetric PSD M (stacked or single) via eigendecomposition."""
    lam, V = np.linalg.eigh(sym(M))
    if p < 0 and np.any(lam <= 0):
        raise np.linalg.LinAlgError("matrix not positive definite")
    lam = np.clip(lam, 0.0, None) ** p
    return (V * lam[..., None, :]) @ np.swapaxes(V, -1, -2)


def _lmin(M):
    return np.linalg.eigvalsh(sym(M))[..., 0]


def _lmax(M):
    return np.linalg.eigvalsh(sym(M))[..., -1]


def _smax(M):
    return np.linalg.svd(M, compute_uv=False)[..., 0]


def _smin(M):
    return np.linalg.svd(M, compute_uv=False)[..., -1]


def _T(M):
    return np.swapaxes(M, -1, -2)


def _inv_checked(M, ts, label):
    rc = 1.0 / np.linalg.cond(M)
    if np.any(~np.isfinite(rc)) or np.any(rc < 1e-14):
        k = int(np.argmin(np.nan_to_num(rc, nan=0.0)))
        raise np.linalg.LinAlgError(f"{label} singular at t = {ts[k]:g}")
    return np.linalg.inv(M)


def mean_field_blocks(model, ts) -> dict:
    """Blocks of the mean-field FBODE d/dt(xi, -eta) = M (xi, eta) at times ``ts``.

    Also returns the intermediate reduced products so that callers
    (conditions, constants, solvers) share one definition.
    """
    c = model.coeffs(ts)
    r = model.reduced(ts)
    Kc = _inv_checked(c.P + r.Pbar_cal, ts, "P+Pbar_cal")
    BBb = c.B + c.Bbar
    Bt = _T(c.B)
    M11 = c.A + c.Abar - BBb @ Kc @ r.Sbar_cal
    M12 = -BBb @ Kc @ Bt
    M21 = c.Q + r.Qbar_cal - r.Rbar_cal @ Kc @ r.Sbar_cal
    M22 = _T(c.A) - r.Rbar_cal @ Kc @ Bt
    return dict(c=c, r=r, Kc=Kc, M11=M11, M12=M12, M21=M21, M22=M22)


def hamiltonian_generator(model, ts) -> np.ndarray:
    """Generator of d/dt(xi, eta): [[M11, M12], [-M21, -M22]]."""
    b = mean_field_blocks(model, ts)
    top = np.concatenate([b["M11"], b["M12"]], axis=2)
    bot = np.concatenate([-b["M21"], -b["M22"]], axis=2)
    return np.concatenate([top, bot], axis=1)


# -------------------------------------------------------------- conditions

def check_small_time(model, grid) -> ConditionReport:
    ts = grid.times
    b = mean_field_blocks(model, ts)
    QTc = model.QT + model.QbarT_cal
    alpha = (2 + 2 * fro(b["M11"]).max()
             + 2 * (fro(b["M12"]) ** 2).max() * max(1.0, fro(QTc) ** 2))
    beta = 2 + 2 * fro(b["M22"]).max() + (fro(b["M21"]) ** 2).max()
    T = grid.T
    lhs = math.exp(min((alpha + beta) * T, 700.0))
    return ConditionReport(
        theorem_id="T3.1", holds=bool(lhs < 2),
        scalars={"alpha": float(alpha), "beta": float(beta), "exp_(a+b)T": lhs,
                 "T_max": math.log(2) / (alpha + beta)},
    )


def _refined_norms(model, ts) -> dict:
    b = mean_field_blocks(model, ts)
    c, r, Kc = b["c"], b["r"], b["Kc"]
    Pinv = _inv_checked(c.P, ts, "P")
    BPB = c.B @ Pinv @ _T(c.B)
    try:
        Qmh = sym_power(c.Q, -0.5)
        BPBmh = sym_power(BPB, -0.5)
    except np.linalg.LinAlgError:
        return {}
    k_a = c.Abar - (c.B + c.Bbar) @ Kc @ r.Sbar_cal
    k_b = (c.B @ Pinv @ r.Pbar_cal - c.Bbar) @ Kc @ _T(c.B)
    k_c = r.Rbar_cal @ Kc @ _T(c.B)
    k_d = r.Rbar_cal @ Kc @ r.Sbar_cal
    return {
        # |||K^T|||_2 with K = k_a: transposing inside the Frobenius norm
        "n2_Abar_term": fro(BPBmh @ k_a @ Qmh),
        "n3_Bbar_term": fro(BPBmh @ k_b @ BPBmh),
        "n2_Rbar_term": fro(Qmh @ k_c @ BPBmh),
        "n1_Qbar_cal": fro(Qmh @ r.Qbar_cal @ Qmh),
        "n1_RPS_term": fro(Qmh @ k_d @ Qmh),
        "BPB": BPB,
    }


def phi_norm(model, T0: float, n_steps: int) -> float:
    """|||phi|||_0 over [0, T0], phi the fundamental solution of A^T."""
    from .model import MatrixPath, TimeGrid
    from .ode_core import fundamental_solution

    grid = TimeGrid(T0, n_steps)
    ts = grid.times
    c = model.coeffs(ts)
    gen = MatrixPath.derived((model.n, model.n), lambda s: _T(model.A.at(s)))
    fs = fundamental_solution(gen, grid)
    Phi = fs.samples
    Phi_inv = np.linalg.inv(Phi)
    Pinv = np.linalg.inv(c.P)
    BPBh = sym_power(c.B @ Pinv @ _T(c.B), 0.5)
    Qh = sym_power(c.Q, 0.5)
    QTh = sym_power(model.QT, 0.5)
    h = grid.h
    best = 0.0
    for k in range(ts.size):
        # phi(s, t_k) = Phi(s) Phi(t_k)^-1 for s >= t_k
        phis = Phi[k:] @ Phi_inv[k]
        integrand = fro(BPBh[k] @ phis @ Qh[k:]) ** 2
        integral = np.trapezoid(integrand, dx=h) if integrand.size > 1 else 0.0
        term = fro(BPBh[k] @ phis[-1] @ QTh) ** 2
        best = max(best, math.sqrt(term + integral))
    return best


def check_refined(model, grid, T0: float | None = None) -> ConditionReport:
    ts = grid.times
    norms = _refined_norms(model, ts)
    if not norms:
        return ConditionReport("T3.2a", False, {}, note="refined condition inapplicable: "
                               "Q or B P^-1 B^T not invertible")
    s = {k: float(v.max()) for k, v in norms.items() if k != "BPB"}
    lhs1 = (s["n2_Abar_term"] ** 2 + s["n3_Bbar_term"] ** 2 + s["n2_Rbar_term"] ** 2
            + (s["n1_Qbar_cal"] + s["n1_RPS_term"]) ** 2)
    scalars = dict(s)
    scalars["cond1_lhs"] = lhs1
    cond1 = lhs1 < 1
    report = ConditionReport("T3.2a", bool(cond1), scalars)
    if T0 is None:
        report.note = "condition 2 not evaluated (no T0 given)"
        return report
    steps = max(2, int(round(grid.n_steps * T0 / grid.T)))
    from .model import TimeGrid

    g0 = TimeGrid(T0, steps)
    n0 = _refined_norms(model, g0.times)
    s0 = {k: float(v.max()) for k, v in n0.items() if k != "BPB"}
    a2 = s0["n2_Abar_term"] ** 2 + s0["n3_Bbar_term"] ** 2
    cc = math.sqrt((s0["n1_Qbar_cal"] + s0["n1_RPS_term"]) ** 2 + s0["n2_Rbar_term"] ** 2)
    scalars.update({"T0": T0, "cond2_a2": a2, "cond2_c": cc})
    if a2 == 0:
        scalars["cond2_applicable"] = False
        report.note = "condition 2 inapplicable (vanishing first two norms); condition 1 decides"
        return report
    phi0 = phi_norm(model, T0, steps)
    bound = ((1 - cc) / (phi0 * math.sqrt(a2) * (1 + cc))) ** 2 if cc < 1 else 0.0
    cond2 = cc < 1 and grid.T < min(T0, bound)
    scalars.update({"cond2_applicable": True, "phi_norm_0": phi0, "cond2_T_bound": min(T0, bound),
                    "cond2_holds": bool(cond2)})
    report.holds = bool(cond1 or cond2)
    report.theorem_id = "T3.2a" if cond1 else "T3.2b"
    return report


def compute_K(model, grid) -> dict:
    ts = grid.times
    b = mean_field_blocks(model, ts)
    c, r, Kc = b["c"], b["r"], b["Kc"]
    K1 = _lmin(c.Q + r.Qbar_cal).min()
    K2 = _lmin((c.B + c.Bbar) @ Kc @ _T(c.B)).min()
    K3 = (_smax(c.Abar - (c.B + c.Bbar) @ Kc @ r.Sbar_cal) ** 2).max()
    K4 = (_smax(r.Rbar_cal @ Kc @ _T(c.B)) ** 2).max()
    K5 = _lmax(r.Rbar_cal @ Kc @ r.Sbar_cal).max()
    return {"K1": float(K1), "K2": float(K2), "K3": float(K3), "K4": float(K4), "K5": float(K5)}


def epsilon_window(K: dict) -> tuple[float, float] | None:
    K1, K2, K3, K4, K5 = (K[f"K{i}"] for i in range(1, 6))
    if K1 - K5 <= 0:
        return None
    lo, hi = (K3 + K4) / (2 * (K1 - K5)), K2
    return (lo, hi) if lo < hi else None


def check_global(K: dict) -> ConditionReport:
    K1, K2, K3, K4, K5 = (K[f"K{i}"] for i in range(1, 6))
    lhs = K3 + K4 + 2 * K2 * K5
    rhs = 2 * K1 * K2
    holds = K1 > 0 and K2 > 0 and lhs < rhs
    scalars = dict(K)
    scalars.update({"lhs": lhs, "rhs": rhs})
    win = epsilon_window(K) if holds else None
    if win is not None:
        scalars.update({"eps_low": win[0], "eps_high": win[1]})
    return ConditionReport("T3.4", bool(holds), scalars)


def weyl_bounds(model, ts) -> dict:
    c = model.coeffs(ts)
    PP = c.P + c.Pbar
    smin_B, smax_B = _smin(c.B), _smax(c.B)
    smin_PP, smax_PP = _smin(PP), _smax(PP)
    rhs1 = smin_B ** 2 * smin_PP / (smax_B * smax_PP)
    lam_Qb = _lmax(c.Qbar)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhs2 = np.where(lam_Qb > 0, (_lmin(c.Q) + _lmin(c.Qbar)) / lam_Qb, np.inf)
        num = smin_B ** 2 * smin_PP - smax_B * _smax(c.Bbar) * smax_PP
        den = smin_B ** 2 * smin_PP + smax_B ** 2 * smax_PP
        smax_Pb = _smax(c.Pbar)
        rhs3 = np.where(smax_Pb > 0, smin_PP / smax_Pb * np.minimum(num / den, 1.0), np.inf)
    return {
        "lhs_Bbar": _smax(c.Bbar), "rhs_Bbar": rhs1,
        "lhs_S": _smax(c.S), "rhs_S": rhs2,
        "lhs_R": _smax(c.R), "rhs_R": rhs3,
    }


def check_weyl(model, grid) -> ConditionReport:
    if model.m < model.n:
        return ConditionReport("Weyl", False, {"n": model.n, "m": model.m},
                               note="inapplicable: needs m >= n")
    ts = grid.times
    w = weyl_bounds(model, ts)
    ok = ((w["lhs_Bbar"] < w["rhs_Bbar"]) & (w["lhs_S"] < w["rhs_S"])
          & (w["lhs_R"] < w["rhs_R"]))
    margin = np.minimum.reduce([w["rhs_Bbar"] - w["lhs_Bbar"], w["rhs_S"] - w["lhs_S"],
                                w["rhs_R"] - w["lhs_R"]])
    scalars = {}
    for key in ("Bbar", "S", "R"):
        scalars[f"max_lhs_{key}"] = float(w[f"lhs_{key}"].max())
        scalars[f"min_rhs_{key}"] = float(w[f"rhs_{key}"].min())
    scalars["min_margin"] = float(margin.min())
    holds = bool(np.all(ok))
    return ConditionReport("Weyl", holds, scalars,
                           witness_t=None if holds else float(ts[int(np.argmin(margin))]))
