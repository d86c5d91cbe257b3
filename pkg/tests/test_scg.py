import numpy as np
import pytest
from scipy.linalg import cho_factor, cho_solve

from radq.learn.scg import ScgConfig, ScgError, scg_minimize


def quadratic(A, b):
    return lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b)


def residual_quadratic(A, b):
    """The same quadratic up to a constant, evaluated without cancellation near its minimum."""
    cf = cho_factor(A)

    def obj(x):
        r = A @ x - b
        return 0.5 * r @ cho_solve(cf, r), r
    return obj


def spd(n, cond, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.geomspace(1.0, cond, n)) @ q.T, rng.standard_normal(n)


def test_isotropic_quadratic():
    b = np.arange(50, dtype=float)
    res = scg_minimize(quadratic(np.eye(50), b), np.zeros(50), ScgConfig(grad_tol=1e-12))
    assert res.converged
    np.testing.assert_allclose(res.x, b, atol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_spd_quadratic_matches_direct_solve(seed):
    A, b = spd(20, 100.0, seed)
    res = scg_minimize(quadratic(A, b), np.zeros(20), ScgConfig(max_iter=200, grad_tol=1e-12))
    assert len(res.trace) <= 200
    assert np.max(np.abs(res.x - np.linalg.solve(A, b))) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_success_steps_monotone(seed):
    A, b = spd(20, 100.0, seed)
    obj = residual_quadratic(A, b)
    res = scg_minimize(obj, np.zeros(20), ScgConfig(max_iter=200, grad_tol=1e-12))
    vals = [obj(np.zeros(20))[0]] + [s.value for s in res.trace if s.success]
    assert all(v1 <= v0 for v0, v1 in zip(vals, vals[1:]))
    assert all(s.lam >= 0 for s in res.trace)
    assert np.max(np.abs(res.x - np.linalg.solve(A, b))) < 1e-8


def test_unresolved_steps_bounded_by_rounding():
    """With cancellation in the objective, accepted values may move by rounding only."""
    A, b = spd(20, 100.0, 2)
    res = scg_minimize(quadratic(A, b), np.zeros(20), ScgConfig(max_iter=200, grad_tol=1e-12))
    vals = [0.0] + [s.value for s in res.trace if s.success]
    rises = [v1 - v0 for v0, v1 in zip(vals, vals[1:]) if v1 > v0]
    assert all(r <= 64 * np.finfo(float).eps * abs(res.value) for r in rises)


def test_rosenbrock():
    def rosen(x):
        f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
        g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
        return f, g
    res = scg_minimize(rosen, np.array([-1.2, 1.0]), ScgConfig(max_iter=2000, grad_tol=1e-10))
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)


def test_already_optimal():
    res = scg_minimize(quadratic(np.eye(3), np.zeros(3)), np.zeros(3))
    assert res.converged and res.value == 0.0


def test_non_finite_start_raises():
    with pytest.raises(ScgError):
        scg_minimize(lambda x: (np.nan, x), np.ones(2))


def test_deterministic():
    A, b = spd(10, 50.0, 3)
    r1 = scg_minimize(quadratic(A, b), np.zeros(10))
    r2 = scg_minimize(quadratic(A, b), np.zeros(10))
    assert r1.x.tobytes() == r2.x.tobytes()
