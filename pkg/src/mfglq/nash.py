"""Finite-N game under the mean-field equilibrium: simulation, objective gaps, bound constants."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model import EMFGModel, TimeGrid
from .rng import max_threads, ordered_map, sqrt_psd
from .spectral import _lmax, _lmin, compute_K, fro, mean_field_blocks

REP_CHUNK = 32


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


# -------------------------------------------------------------- constants

@dataclass
class ConstantsReport:
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    C6: float
    C7: float
    Me1: float
    Me2: float
    Me3: float
    Md4: float
    Md5: float
    Md6: float
    Md7: float
    L1: float
    L2: float
    L3: float
    L4: float
    L5: float
    T: float
    x0_mean_sq: float
    x0_var: float
    sigma_sq: float
    applicable: bool = True
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def noise_level(self) -> float:
        """E||x0 - E x0||^2 + T ||sigma||_T^2."""
        return self.x0_var + self.T * self.sigma_sq

    def state_bound(self, N: int) -> float:
        """Bound on E sup ||x^1 - y^1||^2 under the equilibrium control."""
        return self.Me3 / (N - 1) * self.noise_level

    def gap_bound(self, N: int) -> float:
        """Bound on |game objective - mean-field objective| under the equilibrium control."""
        k = 42 * self.C6 * (1 + self.C7)
        return k / math.sqrt(N - 1) * (self.Me2 * self.x0_mean_sq
                                       + (self.Me1 + self.Me3 * (self.T + 1)) * self.noise_level)

    def nash_bound(self, N: int, mean_v_sq: float = 0.0, v_sq: float = 0.0,
                   v_var: float = 0.0) -> float:
        """epsilon of the Nash property; the control moments are time integrals for player 1."""
        return (self.L1 * self.x0_mean_sq + self.L2 * self.noise_level + self.L3 * mean_v_sq
                + self.L4 * v_sq + self.L5 * v_var) / math.sqrt(N - 1)


def theoretical_constants(model: EMFGModel, grid: TimeGrid, T: float | None = None) -> ConstantsReport:
    """C1..C7, Me1..Me3, Md4..Md7 and L1..L5 with sup-norms over ``grid``.

    Time-dependent exponentials (Me3, Md6, Md7) are evaluated at t = T.
    """
    T = grid.T if T is None else T
    ts = grid.times
    b = mean_field_blocks(model, ts)
    c, r, Kc = b["c"], b["r"], b["Kc"]
    K = np.linalg.inv(c.P + c.Pbar)
    Bt, Nt = _T(c.B), _T(c.N)
    QQ = c.Q + c.Qbar

    def sup(M):
        return float(fro(M).max())

    Ks = compute_K(model, grid)
    K1, K2, K3, K4, K5 = (Ks[f"K{i}"] for i in range(1, 6))
    C1 = 2 * sup(_T(c.A) - c.N @ K @ Bt) + sup(QQ - c.N @ K @ Nt) + sup(QQ) ** 2
    C2 = min(float(_lmin(model.QT + model.QbarT)), float(_lmin(QQ - c.N @ K @ Nt).min()),
             float(_lmin(c.B @ K @ Bt).min()))
    C3 = 3 * K1 + K2 - K5 + math.sqrt((K1 - K5 - K2) ** 2 + 2 * (K3 + K4))
    Qc = c.Q + r.Qbar_cal
    C4 = sup(Qc) ** 2 + 2 * sup(_T(c.A) - r.Rbar_cal @ Kc @ Bt) + sup(Qc - r.Rbar_cal @ Kc @ r.Sbar_cal)
    C5 = 3 * max(sup(c.A) ** 2, sup(c.Abar) ** 2, sup(c.Bbar) ** 2)
    C6 = max(sup(c.Q), sup(c.Qbar), sup(c.Pbar), sup(c.N))
    C7 = max(sup(c.S) ** 2, sup(c.R) ** 2, sup(c.Sbar) ** 2, sup(c.Rbar) ** 2)

    notes = []
    lam_max_QQ = float(_lmax(QQ).max())
    floor = min(float(_lmin(QQ).min()), float(_lmin(c.P + c.Pbar).min()))
    shrink = 1 - model.delta / lam_max_QQ if lam_max_QQ > 0 else 0.0
    if C2 <= 0 or shrink <= 0 or floor <= 0:
        notes.append("Me1 undefined (C2, Q+Qbar or P+Pbar degenerate)")
        Me1 = math.inf
    else:
        Me1 = (1 + C1 ** 2 / C2 ** 2) / shrink / floor
    if C3 <= 0:
        notes.append("C3 <= 0, Me2 undefined")
        Me2 = math.inf
    else:
        kc = sup(Kc) ** 2
        Me2 = 4 * C4 / C3 ** 2 * (1 + kc * sup(r.Sbar_cal) ** 2 + kc * sup(Bt) ** 2)
    Me3 = Me1 * C5 * math.exp(3 * C5 * T)

    nA, nB, nAb, nBb = sup(c.A), sup(c.B), sup(c.Abar), sup(c.Bbar)
    Md4 = (1 + nB) * math.exp(T * (2 * nA + nB))
    Md5 = (1 + nB + Me2 * nAb + Me2 * nBb) * math.exp(T * (2 * nA + nB + nAb + nBb))
    Md6 = 6 * C5 * math.exp(7 * C5 * T) * (Me1 + Md4)
    Md7 = 6 * C5 * math.exp(7 * C5 * T) * Md4

    k = C6 * (1 + C7)
    L1 = 78 * k * Me2 + 36 * k * Md5 * (T + 1)
    L2 = 78 * k * Me1 + 42 * k * Me3 * (T + 1) + 36 * k * Md4 * (T + 1) + 36 * k * Md6 * (T + 1)
    L3 = 36 * k * Md5 * (T + 1)
    L4 = 36 * k
    L5 = 36 * k * (Md4 + Md7) * (T + 1)

    x0m = np.asarray(model.x0_mean, float)
    with np.errstate(invalid="ignore"):
        vals = dict(C1=C1, C2=C2, C3=C3, C4=C4, C5=C5, C6=C6, C7=C7, Me1=Me1, Me2=Me2, Me3=Me3,
                    Md4=Md4, Md5=Md5, Md6=Md6, Md7=Md7, L1=L1, L2=L2, L3=L3, L4=L4, L5=L5)
    return ConstantsReport(
        **{k_: float(v) for k_, v in vals.items()}, T=float(T),
        x0_mean_sq=float(x0m @ x0m), x0_var=float(np.trace(model.x0_cov)),
        sigma_sq=sup(c.sigma) ** 2, applicable=not notes, note="; ".join(notes))


# ------------------------------------------------------------- simulation

Deviation = Callable[[int, np.ndarray], np.ndarray]
"""Player 1's dummy control as a function of (grid index, player-1 mean-field state)."""


def _player_normals(seed, rep, N, shape):
    out = np.empty((N,) + shape)
    for i in range(N):
        ss = np.random.SeedSequence(int(seed), spawn_key=(2, int(rep), i))
        out[i] = np.random.Generator(np.random.PCG64(ss)).standard_normal(shape)
    return out


@dataclass
class GameSample:
    """Per-replication, per-player results (arrays of shape (n_mc, N))."""

    N: int
    game_cost: np.ndarray
    mf_cost: np.ndarray
    state_err: np.ndarray  # sup_t ||x^i - y^i||^2
    v1_mean: np.ndarray | None = None  # (steps+1, m) average of player 1's control over reps
    v1_sq: float = 0.0  # int E||v^1||^2 (MC)
    v1_var: float = 0.0  # int E||v^1 - E v^1||^2 (MC)


def _quad(a, M, b):
    return np.einsum("...i,ij,...j->...", a, M, b)


def _cost_rate(ck, x, v, xm, vm):
    xs = x - xm @ ck["S"].T
    xsb = x - xm @ ck["Sbar"].T
    vr = v - vm @ ck["R"].T
    vrb = v - vm @ ck["Rbar"].T
    return 0.5 * (_quad(x, ck["Q"], x) + _quad(v, ck["P"], v) + _quad(xs, ck["Qbar"], xs)
                  + 2 * _quad(xsb, ck["N"], vrb) + _quad(vr, ck["Pbar"], vr))


def _terminal(model, x, xm):
    xs = x - xm @ model.ST.T
    return 0.5 * (_quad(x, model.QT, x) + _quad(xs, model.QbarT, xs))


def _simulate_chunk(model, feedback, fbode, N, seed, reps, deviation):
    ts = fbode.times
    h = ts[1] - ts[0]
    steps = ts.size - 1
    n = model.n
    c = model.coeffs(ts)
    R = len(reps)
    z = np.stack([_player_normals(seed, r, N, (steps + 1, n)) for r in reps])  # (R, N, k, n)
    L0 = sqrt_psd(model.x0_cov)
    d = z[:, :, 0] @ L0.T  # mean-field deviation x - xi
    e = d.copy()  # game deviation y - xi
    xi, ups = fbode.xi, fbode.upsilon
    inv = 1.0 / (N - 1)
    coef = {k_: getattr(c, k_) for k_ in ("Q", "P", "Qbar", "Pbar", "S", "Sbar", "R", "Rbar", "N")}
    game = np.zeros((R, N))
    mf = np.zeros((R, N))
    serr = np.zeros((R, N))
    v1_sum = np.zeros((steps + 1, model.m))
    v1_sq = np.zeros(steps + 1)
    v1_sqsum = np.zeros((steps + 1, model.m))

    for k in range(steps + 1):
        x = xi[k] + d
        y = xi[k] + e
        v = x @ feedback.F[k].T + (feedback.G[k] @ xi[k] + feedback.g[k])
        if deviation is not None:
            v[:, 0] = deviation(k, x[:, 0])
        v1_sum[k] = v[:, 0].sum(0)
        v1_sqsum[k] = (v[:, 0] ** 2).sum(0)
        v1_sq[k] = (v[:, 0] ** 2).sum()
        ysum = y.sum(1, keepdims=True)
        vsum = v.sum(1, keepdims=True)
        y_oth = (ysum - y) * inv
        v_oth = (vsum - v) * inv
        ck = {k_: M[k] for k_, M in coef.items()}
        w = 0.5 * h if k in (0, steps) else h
        game += w * _cost_rate(ck, y, v, y_oth, v_oth)
        mf += w * _cost_rate(ck, x, v, xi[k], ups[k])
        dev = x - y
        serr = np.maximum(serr, np.einsum("rni,rni->rn", dev, dev))
        if k == steps:
            game += _terminal(model, y, y_oth)
            mf += _terminal(model, x, xi[k])
            break
        dW = z[:, :, k + 1] * np.sqrt(h)
        noise = dW @ c.sigma[k].T
        vdev = v - ups[k]
        # d/dt of (x - xi) and (y - xi); the mean-field drift of xi cancels
        dd = d @ c.A[k].T + vdev @ c.B[k].T
        de = (e @ c.A[k].T + vdev @ c.B[k].T
              + ((e.sum(1, keepdims=True) - e) * inv) @ c.Abar[k].T
              + ((vdev.sum(1, keepdims=True) - vdev) * inv) @ c.Bbar[k].T)
        d = d + h * dd + noise
        e = e + h * de + noise
    return game, mf, serr, v1_sum, v1_sqsum, v1_sq


def simulate_nplayer(model: EMFGModel, feedback, fbode, N: int, n_mc: int, seed: int = 0,
                     deviation: Deviation | None = None) -> GameSample:
    """Simulate N players and their mean-field counterparts with shared noise.

    Every player i in replication r has its own stream (seed, r, i), reused
    for the game state y^i and the mean-field state x^i.  Players use the
    equilibrium control process generated by their mean-field state; player 1
    may instead use ``deviation``.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    if n_mc < 1:
        raise ValueError("n_mc must be positive")
    jobs = [list(range(s, min(s + REP_CHUNK, n_mc))) for s in range(0, n_mc, REP_CHUNK)]
    parts = ordered_map(lambda reps: _simulate_chunk(model, feedback, fbode, N, seed, reps,
                                                     deviation), jobs)
    game = np.concatenate([p[0] for p in parts])
    mf = np.concatenate([p[1] for p in parts])
    serr = np.concatenate([p[2] for p in parts])
    ts = fbode.times
    h = ts[1] - ts[0]
    wts = np.full(ts.size, h)
    wts[[0, -1]] = 0.5 * h
    v1_mean = sum(p[3] for p in parts) / n_mc
    v1_sq = float(wts @ (sum(p[5] for p in parts) / n_mc))
    second = sum(p[4] for p in parts) / n_mc
    v1_var = float(wts @ np.clip(second - v1_mean ** 2, 0, None).sum(1))
    return GameSample(N, game, mf, serr, v1_mean, v1_sq, v1_var)


# ------------------------------------------------------------------ rates

@dataclass
class NashExperiment:
    Ns: list
    n_mc: int = 500
    seed: int = 0
    deviation: Deviation | None = None

    def __post_init__(self):
        if any(int(N) < 2 for N in self.Ns):
            raise ValueError("all N must be at least 2")
        if self.n_mc < 1:
            raise ValueError("n_mc must be positive")


@dataclass
class RateRow:
    N: int
    state_err: float
    state_err_se: float
    gap: float
    gap_se: float
    abs_gap_pathwise: float
    gap_exact: float | None
    state_bound: float
    gap_bound: float
    nash_bound: float


@dataclass
class RateReport:
    rows: list
    state_slope: float
    gap_slope: float
    pathwise_gap_slope: float
    exact_gap_slope: float | None
    constants: ConstantsReport
    seed: int
    n_mc: int
    notes: list = field(default_factory=list)

    @property
    def gaps_within_bound(self) -> bool:
        return all(r.gap <= r.nash_bound for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n_mc": self.n_mc,
            "state_slope": self.state_slope, "gap_slope": self.gap_slope,
            "pathwise_gap_slope": self.pathwise_gap_slope,
            "exact_gap_slope": self.exact_gap_slope,
            "gaps_within_bound": self.gaps_within_bound,
            "rows": [asdict(r) for r in self.rows],
            "constants": self.constants.to_dict(), "notes": self.notes,
        }

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "mean_state_error", "std_err", "objective_gap", "objective_gap_se",
                        "objective_gap_exact", "theoretical_bound"])
            for r in self.rows:
                w.writerow([r.N, repr(r.state_err), repr(r.state_err_se), repr(r.gap),
                            repr(r.gap_se), "" if r.gap_exact is None else repr(r.gap_exact),
                            repr(r.nash_bound)])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2, default=float)


def _slope(Ns, vals) -> float:
    x = np.log(np.asarray(Ns, float) - 1)
    y = np.log(np.maximum(np.asarray(vals, float), 1e-300))
    return float(np.polyfit(x, y, 1)[0])


def epsilon_nash_estimate(model: EMFGModel, feedback, fbode, experiment: NashExperiment,
                          grid: TimeGrid | None = None) -> RateReport:
    """Objective gap and state error against N, with log-log slopes and bounds.

    Without a deviation all players are exchangeable, so each replication's
    statistic is averaged over the N players before taking MC moments.
    With a deviation only player 1 is used.
    """
    grid = grid or TimeGrid(float(fbode.times[-1] - fbode.times[0]), fbode.times.size - 1)
    consts = theoretical_constants(model, grid)
    rows = []
    for N in experiment.Ns:
        s = simulate_nplayer(model, feedback, fbode, int(N), experiment.n_mc, experiment.seed,
                             experiment.deviation)
        if experiment.deviation is None:
            diff = (s.game_cost - s.mf_cost).mean(1)
            err = s.state_err.mean(1)
            absdiff = np.abs(s.game_cost - s.mf_cost).mean(1)
        else:
            diff = s.game_cost[:, 0] - s.mf_cost[:, 0]
            err = s.state_err[:, 0]
            absdiff = np.abs(diff)
        sq = math.sqrt(len(diff))
        se = lambda a: float(a.std(ddof=1) / sq) if len(a) > 1 else 0.0  # noqa: E731
        h = fbode.times[1] - fbode.times[0]
        wts = np.full(fbode.times.size, h)
        wts[[0, -1]] = 0.5 * h
        mean_v_sq = float(wts @ (s.v1_mean ** 2).sum(1))
        exact = None
        if experiment.deviation is None:
            g_, m_ = exact_objectives(model, feedback, fbode, int(N))
            exact = abs(g_ - m_)
        rows.append(RateRow(
            int(N), float(err.mean()), se(err), float(abs(diff.mean())), se(diff),
            float(absdiff.mean()), exact, consts.state_bound(N), consts.gap_bound(N),
            consts.nash_bound(N, mean_v_sq, s.v1_sq, s.v1_var)))
    Ns = [r.N for r in rows]
    notes = [] if consts.applicable else [consts.note]
    if max_threads() > 1:
        notes.append("replication chunks run in threads; results are independent of the thread count")
    return RateReport(rows, _slope(Ns, [r.state_err for r in rows]),
                      _slope(Ns, [r.gap for r in rows]),
                      _slope(Ns, [r.abs_gap_pathwise for r in rows]),
                      None if experiment.deviation is not None
                      else _slope(Ns, [r.gap_exact for r in rows]),
                      consts, experiment.seed, experiment.n_mc, notes)


# ---------------------------------------------------- exact second moments

def _cost_weight(ck, n, m):
    """W with cost rate = u^T W u / 2 for u = (x, v, mean x, mean v)."""
    In, Im = np.eye(n), np.eye(m)
    Zn, Zm, Znm, Zmn = np.zeros((n, n)), np.zeros((m, m)), np.zeros((n, m)), np.zeros((m, n))
    E1 = np.block([In, Znm, Zn, Znm])
    E2 = np.block([Zmn, Im, Zmn, Zm])
    E3 = np.block([In, Znm, -ck["S"], Znm])
    E4 = np.block([In, Znm, -ck["Sbar"], Znm])
    E5 = np.block([Zmn, Im, Zmn, -ck["Rbar"]])
    E6 = np.block([Zmn, Im, Zmn, -ck["R"]])
    cross = E4.T @ ck["N"] @ E5
    return (E1.T @ ck["Q"] @ E1 + E2.T @ ck["P"] @ E2 + E3.T @ ck["Qbar"] @ E3
            + cross + cross.T + E6.T @ ck["Pbar"] @ E6)


def exact_objectives(model: EMFGModel, feedback, fbode, N: int) -> tuple[float, float]:
    """Expected game and mean-field objectives of one player, no deviation.

    Propagates the exchangeable second moments of z^i = (x^i - xi, y^i - xi)
    through the same Euler recursion and trapezoid rule used by
    ``simulate_nplayer``, so the MC estimates are unbiased for these values.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    ts = fbode.times
    h = ts[1] - ts[0]
    n, m = model.n, model.m
    c = model.coeffs(ts)
    xi, ups = fbode.xi, fbode.upsilon
    Zn = np.zeros((n, n))
    In = np.eye(n)
    C0 = np.asarray(model.x0_cov, float)
    Ss = np.block([[C0, C0], [C0, C0]])  # E z^i z^i^T
    Sc = np.zeros((2 * n, 2 * n))  # E z^i z^j^T, i != j
    a = 1.0 / (N - 1)
    game = mf = 0.0
    steps = ts.size - 1
    for k in range(steps + 1):
        ck = {k_: getattr(c, k_)[k] for k_ in ("Q", "P", "Qbar", "Pbar", "S", "Sbar", "R", "Rbar", "N")}
        W = _cost_weight(ck, n, m)
        F = feedback.F[k]
        mu = np.concatenate([xi[k], ups[k], xi[k], ups[k]])
        Sb = a * (Ss + (N - 2) * Sc)  # E z^i zbar_{-i}^T is Sc; E zbar zbar^T is Sb
        # game: u = mu + Psi (z^i, zbar_{-i})
        Pg = np.block([[Zn, In, Zn, Zn], [F, np.zeros((m, n)), np.zeros((m, n)), np.zeros((m, n))],
                       [Zn, Zn, Zn, In], [np.zeros((m, n)), np.zeros((m, n)), F, np.zeros((m, n))]])
        Cg = np.block([[Ss, Sc], [Sc, Sb]])
        Pm = np.block([[In, Zn], [F, np.zeros((m, n))], [Zn, Zn], [np.zeros((m, n)), Zn]])
        base = 0.5 * mu @ W @ mu
        rate_g = base + 0.5 * np.trace(W @ Pg @ Cg @ Pg.T)
        rate_m = base + 0.5 * np.trace(W @ Pm @ Ss @ Pm.T)
        w = 0.5 * h if k in (0, steps) else h
        game += w * rate_g
        mf += w * rate_m
        if k == steps:
            IS = np.block([In, -model.ST])
            WT = np.block([[model.QT, Zn], [Zn, Zn]]) + IS.T @ model.QbarT @ IS
            muT = np.concatenate([xi[k], xi[k]])
            bT = 0.5 * muT @ WT @ muT
            Gy = np.block([[Zn, In, Zn, Zn], [Zn, Zn, Zn, In]])
            Gx = np.block([[In, Zn], [Zn, Zn]])
            game += bT + 0.5 * np.trace(WT @ Gy @ Cg @ Gy.T)
            mf += bT + 0.5 * np.trace(WT @ Gx @ Ss @ Gx.T)
            break
        A, B, Ab, Bb, sg = c.A[k], c.B[k], c.Abar[k], c.Bbar[k], c.sigma[k]
        Phi = np.eye(2 * n) + h * np.block([[A + B @ F, Zn], [B @ F, A]])
        Kc = h * np.block([[Zn, Zn], [Bb @ F, Ab]])
        Lam = np.vstack([sg, sg])
        Sbb = (a * a) * ((N - 2) * Ss + ((N - 1) ** 2 - (N - 2)) * Sc)
        new_s = (Phi @ Ss @ Phi.T + Phi @ Sc @ Kc.T + Kc @ Sc @ Phi.T + Kc @ Sb @ Kc.T
                 + h * Lam @ Lam.T)
        new_c = Phi @ Sc @ Phi.T + Phi @ Sb @ Kc.T + Kc @ Sb @ Phi.T + Kc @ Sbb @ Kc.T
        Ss, Sc = new_s, 0.5 * (new_c + new_c.T)
    return float(game), float(mf)
