import numpy as np
import pytest

from mfglq.model import EMFGModel, EMFTCModel, TimeGrid

ONE = np.eye(1)


def scalar_game(**kw):
    base = dict(A=0 * ONE, B=ONE, Q=ONE, P=ONE)
    base.update({k: np.atleast_2d(v) for k, v in kw.items() if k not in ("x0_mean", "x0_cov", "T", "delta")})
    return EMFGModel.build(1, 1, kw.get("T", 1.0), delta=kw.get("delta", 1e-6),
                           x0_mean=kw.get("x0_mean", [1.0]), x0_cov=kw.get("x0_cov"), **base)


def scalar_control(**kw):
    base = dict(A=0 * ONE, B=ONE, Q=ONE, P=ONE)
    base.update({k: np.atleast_2d(v) for k, v in kw.items() if k not in ("x0_mean", "x0_cov", "T", "delta")})
    return EMFTCModel.build(1, 1, kw.get("T", 1.0), delta=kw.get("delta", 1e-6),
                            x0_mean=kw.get("x0_mean", [1.0]), x0_cov=kw.get("x0_cov"), **base)


def random_game(rng, n=2, scale=0.1):
    """Convex game with small mean-field terms; P, Q well conditioned."""
    def spd(s=1.0):
        X = rng.standard_normal((n, n))
        return s * (X @ X.T / n + np.eye(n))

    def small():
        return scale * rng.standard_normal((n, n))

    return EMFGModel.build(
        n, n, 1.0, A=small() * 5, B=np.eye(n) + small(), Abar=small(), Bbar=small(),
        Q=spd(), P=spd(), Qbar=spd(scale), Pbar=spd(scale), S=small(), R=small(),
        Sbar=small(), Rbar=small(), N=small(), sigma=0.3 * np.eye(n),
        QT=spd(0.5), x0_mean=rng.standard_normal(n))


@pytest.fixture
def grid():
    return TimeGrid(1.0, 2000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
