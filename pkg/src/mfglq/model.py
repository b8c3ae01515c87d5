"""Coefficient data model for linear-quadratic EMFG / EMFTC problems.

Every time-varying coefficient lives in a :class:`MatrixPath`.  Paths are
evaluated in bulk on arrays of times, returning stacked ``(k, rows, cols)``
arrays, so that solvers can precompute everything they need on a grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable

import numpy as np

from .spectral import ConditionReport, eig_sym, sym

DEFAULT_DELTA = 1e-6

# name -> (row dim, col dim) in terms of state dim n and control dim m
COEFFICIENT_SHAPES = {
    "A": ("n", "n"),
    "B": ("n", "m"),
    "Abar": ("n", "n"),
    "Bbar": ("n", "m"),
    "sigma": ("n", "n"),
    "Q": ("n", "n"),
    "P": ("m", "m"),
    "Qbar": ("n", "n"),
    "Pbar": ("m", "m"),
    "S": ("n", "n"),
    "Sbar": ("n", "n"),
    "R": ("m", "m"),
    "Rbar": ("m", "m"),
    "N": ("n", "m"),
}
TERMINAL_NAMES = ("QT", "QbarT", "ST")
WEIGHT_NAMES = ("Q", "Qbar", "P", "Pbar")


class ModelError(ValueError):
    """Raised for malformed or inadmissible model data."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self):
        if not self.T > self.t_start:
            raise ModelError(f"time grid needs T > {self.t_start}, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ModelError(f"time grid needs n_steps >= 2, got {self.n_steps}")

    @property
    def h(self) -> float:
        return (self.T - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.T, self.n_steps + 1)

    @property
    def half_times(self) -> np.ndarray:
        """Grid points and midpoints, as needed by RK4 stages."""
        return np.linspace(self.t_start, self.T, 2 * self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor, self.t_start)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MatrixPath:
    """A matrix-valued function of time.

    Either constant, sampled (piecewise-linear between ascending sample
    times, clamped outside them) or derived from other paths through ``fn``.
    """

    shape: tuple
    value: np.ndarray | None = None
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def constant(cls, matrix) -> "MatrixPath":
        m = np.atleast_2d(np.array(matrix, dtype=float))
        return cls(shape=m.shape, value=_frozen(m))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "MatrixPath":
        return cls.constant(np.zeros((rows, cols)))

    @classmethod
    def sampled(cls, times, values) -> "MatrixPath":
        ts = np.asarray(times, dtype=float)
        vs = np.array(values, dtype=float)
        if vs.ndim == 1:
            vs = vs[:, None, None]
        elif vs.ndim == 2:
            vs = vs[:, :, None] if vs.shape[0] == ts.size else vs[None]
        if ts.ndim != 1 or ts.size < 1 or vs.shape[0] != ts.size:
            raise ModelError("sampled path needs one matrix per sample time")
        if np.any(np.diff(ts) <= 0):
            raise ModelError("sample times must be strictly increasing")
        return cls(shape=vs.shape[1:], times=_frozen(ts), values=_frozen(vs))

    @classmethod
    def derived(cls, shape, fn) -> "MatrixPath":
        return cls(shape=tuple(shape), fn=fn)

    @property
    def is_constant(self) -> bool:
        return self.value is not None

    def at(self, ts) -> np.ndarray:
        """Evaluate on an array of times; returns shape (len(ts), rows, cols)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if self.value is not None:
            return np.broadcast_to(self.value, (ts.size,) + self.shape).copy()
        if self.fn is not None:
            return np.asarray(self.fn(ts), dtype=float)
        flat = self.values.reshape(self.times.size, -1)
        out = np.empty((ts.size, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.interp(ts, self.times, flat[:, j])
        return out.reshape((ts.size,) + self.shape)

    def __call__(self, t: float) -> np.ndarray:
        return self.at([t])[0]

    def check_points(self, T: float) -> np.ndarray:
        """Times at which interpolated-convex properties must be verified."""
        if self.times is None:
            return np.array([0.0])
        inside = self.times[(self.times >= 0.0) & (self.times <= T)]
        return np.unique(np.concatenate([[0.0, T], inside]))

    def to_dict(self) -> dict:
        if self.value is not None:
            return {"type": "constant", "value": self.value.tolist()}
        if self.times is not None:
            return {"type": "samples", "times": self.times.tolist(),
                    "values": self.values.tolist(), "interp": "linear"}
        raise ModelError("derived paths are not serializable")


def _path_from_json(name: str, spec, shape: tuple) -> MatrixPath:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ModelError(f"coefficient {name}: expected an object with a 'type' key")
    kind = spec["type"]
    if kind == "constant":
        path = MatrixPath.constant(spec["value"])
    elif kind == "samples":
        if spec.get("interp", "linear") != "linear":
            raise ModelError(f"coefficient {name}: only linear interpolation is supported")
        path = MatrixPath.sampled(spec["times"], spec["values"])
    else:
        raise ModelError(f"coefficient {name}: unknown path type {kind!r}")
    if tuple(path.shape) != tuple(shape):
        raise ModelError(f"dimension mismatch for {name}: expected {shape}, got {tuple(path.shape)}")
    return path


@dataclass(frozen=True, eq=False)
class LQModel:
    """Shared layout of the game and the control problem."""

    n: int
    m: int
    T: float
    A: MatrixPath
    B: MatrixPath
    Abar: MatrixPath
    Bbar: MatrixPath
    sigma: MatrixPath
    Q: MatrixPath
    P: MatrixPath
    Qbar: MatrixPath
    Pbar: MatrixPath
    S: MatrixPath
    Sbar: MatrixPath
    R: MatrixPath
    Rbar: MatrixPath
    N: MatrixPath
    QT: np.ndarray
    QbarT: np.ndarray
    ST: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    delta: float = DEFAULT_DELTA

    kind = "lq"

    @classmethod
    def build(cls, n: int, m: int, T: float, delta: float = DEFAULT_DELTA,
              x0_mean=None, x0_cov=None, validate: bool = True, **mats):
        """Construct from plain arrays/paths; missing entries are zero."""
        dims = {"n": n, "m": m}
        kwargs = {}
        for name, (r, c) in COEFFICIENT_SHAPES.items():
            v = mats.pop(name, None)
            shape = (dims[r], dims[c])
            if v is None:
                kwargs[name] = MatrixPath.zeros(*shape)
            elif isinstance(v, MatrixPath):
                kwargs[name] = v
            else:
                kwargs[name] = MatrixPath.constant(np.reshape(np.asarray(v, dtype=float), shape))
        for name in TERMINAL_NAMES:
            v = mats.pop(name, None)
            kwargs[name] = _frozen(np.zeros((n, n)) if v is None else np.reshape(v, (n, n)))
        if mats:
            raise ModelError(f"unknown coefficients: {sorted(mats)}")
        x0_mean = np.zeros(n) if x0_mean is None else np.reshape(np.asarray(x0_mean, float), n)
        x0_cov = np.zeros((n, n)) if x0_cov is None else np.reshape(np.asarray(x0_cov, float), (n, n))
        model = cls(n=n, m=m, T=float(T), delta=float(delta), x0_mean=_frozen(x0_mean),
                    x0_cov=_frozen(x0_cov), **kwargs)
        if validate:
            model.validate()
        return model

    def replace(self, **changes):
        """A copy with some coefficients changed (arrays or paths), revalidated."""
        data = {name: getattr(self, name) for name in COEFFICIENT_SHAPES}
        data.update({name: getattr(self, name) for name in TERMINAL_NAMES})
        data.update(x0_mean=self.x0_mean, x0_cov=self.x0_cov, delta=self.delta, T=self.T)
        validate = changes.pop("validate", True)
        data.update(changes)
        T = data.pop("T")
        return type(self).build(self.n, self.m, T, validate=validate, **data)

    def validate(self) -> None:
        dims = {"n": self.n, "m": self.m}
        for name, (r, c) in COEFFICIENT_SHAPES.items():
            path = getattr(self, name)
            if tuple(path.shape) != (dims[r], dims[c]):
                raise ModelError(f"dimension mismatch for {name}: expected "
                                 f"{(dims[r], dims[c])}, got {tuple(path.shape)}")
            if path.times is not None and (path.times[0] > 0.0 or path.times[-1] < self.T):
                raise ModelError(f"samples of {name} do not cover [0, {self.T}]")
        if not self.delta > 0:
            raise ModelError("delta must be positive")
        for name in WEIGHT_NAMES:
            path = getattr(self, name)
            for M in path.at(path.check_points(self.T)):
                _require_psd(name, M)
        for name in ("QT", "QbarT"):
            _require_psd(name, getattr(self, name))
        _require_psd("x0_cov", self.x0_cov)
        for a, b, label in (("Q", "Qbar", "Q+Qbar"), ("P", "Pbar", "P+Pbar")):
            pa, pb = getattr(self, a), getattr(self, b)
            ts = np.union1d(pa.check_points(self.T), pb.check_points(self.T))
            lo = min(eig_sym(sym(M))[0] for M in pa.at(ts) + pb.at(ts))
            if lo < self.delta:
                raise ModelError(f"delta-margin violated: lambda_min({label}) = {lo:.6g} < delta = {self.delta:g}")

    def coeffs(self, ts) -> SimpleNamespace:
        """All coefficient paths evaluated at ``ts``, as stacked arrays."""
        return SimpleNamespace(**{name: getattr(self, name).at(ts) for name in COEFFICIENT_SHAPES})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "n": self.n, "m": self.m, "T": self.T, "delta": self.delta,
            "x0_mean": self.x0_mean.tolist(), "x0_cov": self.x0_cov.tolist(),
            "coefficients": {name: getattr(self, name).to_dict() for name in COEFFICIENT_SHAPES},
            "terminal": {name: getattr(self, name).tolist() for name in TERMINAL_NAMES},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _require_psd(name: str, M: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise ModelError(f"non-symmetric weight {name}")
    lam = eig_sym(sym(M))
    if lam[0] < -1e-12 * max(1.0, abs(lam[-1])):
        raise ModelError(f"non-PSD weight {name} (lambda_min = {lam[0]:.6g})")


class EMFGModel(LQModel):
    kind = "emfg"

    def reduced(self, ts) -> SimpleNamespace:
        """Reduced coefficients at ``ts``: P(I-R)-type products used throughout."""
        c = self.coeffs(ts)
        In, Im = np.eye(self.n), np.eye(self.m)
        return SimpleNamespace(
            Pbar_cal=c.Pbar @ (Im - c.R),
            Qbar_cal=c.Qbar @ (In - c.S),
            Rbar_cal=c.N @ (Im - c.Rbar),
            Sbar_cal=np.swapaxes(c.N, 1, 2) @ (In - c.Sbar),
        )

    @property
    def QbarT_cal(self) -> np.ndarray:
        return self.QbarT @ (np.eye(self.n) - self.ST)


class EMFTCModel(LQModel):
    kind = "emftc"

    def tilde(self, ts) -> SimpleNamespace:
        c = self.coeffs(ts)
        In, Im = np.eye(self.n), np.eye(self.m)
        IS = In - c.S
        IR = Im - c.R
        IRb = Im - c.Rbar
        # Pbar weighs v - R E[v], so the mean part of that term carries (I - R), not (I - Rbar)
        return SimpleNamespace(
            Q_tilde=np.swapaxes(IS, 1, 2) @ c.Qbar @ IS,
            P_tilde=np.swapaxes(IR, 1, 2) @ c.Pbar @ IR,
            N_tilde=np.swapaxes(In - c.Sbar, 1, 2) @ c.N @ IRb,
        )

    @property
    def QT_tilde(self) -> np.ndarray:
        IS = np.eye(self.n) - self.ST
        return IS.T @ self.QbarT @ IS


@dataclass(frozen=True, eq=False)
class ReducedCoefficients:
    Pbar_cal: MatrixPath
    Qbar_cal: MatrixPath
    Rbar_cal: MatrixPath
    Sbar_cal: MatrixPath
    QbarT_cal: np.ndarray


def reduce(model: EMFGModel) -> ReducedCoefficients:
    n, m = model.n, model.m

    def part(name, shape):
        return MatrixPath.derived(shape, lambda ts: getattr(model.reduced(ts), name))

    return ReducedCoefficients(
        Pbar_cal=part("Pbar_cal", (m, m)),
        Qbar_cal=part("Qbar_cal", (n, n)),
        Rbar_cal=part("Rbar_cal", (n, m)),
        Sbar_cal=part("Sbar_cal", (m, n)),
        QbarT_cal=_frozen(model.QbarT_cal),
    )


def load_model(path, kind: str | None = None) -> LQModel:
    """Read a model from the JSON schema described in the README."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ModelError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ModelError(f"parse error in {path}: {exc}") from None
    return model_from_dict(data, kind)


def model_from_dict(data: dict, kind: str | None = None) -> LQModel:
    try:
        file_kind = data.get("kind", kind or "emfg")
        kind = kind or file_kind
        if kind != file_kind:
            raise ModelError(f"model kind is {file_kind!r}, expected {kind!r}")
        cls = {"emfg": EMFGModel, "emftc": EMFTCModel}.get(kind)
        if cls is None:
            raise ModelError(f"unknown model kind {kind!r}")
        n, m, T = int(data["n"]), int(data["m"]), float(data["T"])
        dims = {"n": n, "m": m}
        coeffs = data.get("coefficients", {})
        unknown = set(coeffs) - set(COEFFICIENT_SHAPES)
        if unknown:
            raise ModelError(f"unknown coefficients: {sorted(unknown)}")
        mats = {name: _path_from_json(name, spec, (dims[COEFFICIENT_SHAPES[name][0]],
                                                   dims[COEFFICIENT_SHAPES[name][1]]))
                for name, spec in coeffs.items()}
        term = data.get("terminal", {})
        for name in TERMINAL_NAMES:
            if name in term:
                M = np.atleast_2d(np.array(term[name], dtype=float))
                if M.shape != (n, n):
                    raise ModelError(f"dimension mismatch for {name}: expected {(n, n)}, got {M.shape}")
                mats[name] = M
        x0_mean = data.get("x0_mean")
        x0_cov = data.get("x0_cov")
        if x0_mean is not None and np.size(x0_mean) != n:
            raise ModelError("dimension mismatch for x0_mean")
        if x0_cov is not None and np.size(x0_cov) != n * n:
            raise ModelError("dimension mismatch for x0_cov")
        return cls.build(n, m, T, delta=float(data.get("delta", DEFAULT_DELTA)),
                         x0_mean=x0_mean, x0_cov=x0_cov, **mats)
    except KeyError as exc:
        raise ModelError(f"parse error: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"parse error: {exc}") from None


def validate_convexity(model: LQModel, grid: TimeGrid) -> ConditionReport:
    """Check Q+Qbar - N(P+Pbar)^-1 N^T > delta I and B(P+Pbar)^-1 B^T > delta I on the grid."""
    ts = grid.times
    c = model.coeffs(ts)
    PP = c.P + c.Pbar
    conds = np.linalg.cond(PP)
    if not np.all(np.isfinite(conds)) or np.any(conds > 1e14):
        k = int(np.argmax(np.where(np.isfinite(conds), conds, np.inf)))
        raise np.linalg.LinAlgError(f"P+Pbar singular at t = {ts[k]:g}")
    K = np.linalg.inv(PP)
    Nt = np.swapaxes(c.N, 1, 2)
    first = c.Q + c.Qbar - c.N @ K @ Nt
    second = c.B @ K @ np.swapaxes(c.B, 1, 2)
    m1 = np.array([eig_sym(sym(M))[0] for M in first]) - model.delta
    m2 = np.array([eig_sym(sym(M))[0] for M in second]) - model.delta
    holds = bool(np.all(m1 > 0) and np.all(m2 > 0))
    worst = m1 if m1.min() <= m2.min() else m2
    return ConditionReport(
        theorem_id="convexity",
        holds=holds,
        scalars={"margin_state": float(m1.min()),
                 "margin_control": float(m2.min()),
                 "delta": model.delta},
        witness_t=None if holds else float(ts[int(np.argmin(worst))]),
    )
