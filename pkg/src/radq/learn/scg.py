"""Scaled conjugate gradient minimisation (Møller, 1993).

SCG replaces the line search of conjugate gradient with a Levenberg-Marquardt
style scale ``lam`` on a finite-difference estimate of the Hessian-vector
product.  Each iteration costs at most two gradient evaluations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

_UNRESOLVED = 64 * np.finfo(float).eps

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class ScgError(FloatingPointError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class ScgConfig:
    sigma: float = 1e-5
    lambda_init: float = 1e-6
    max_iter: int = 200
    grad_tol: float = 1e-6
    # lam multiplier after a very good step (comparison parameter >= 0.75)
    lambda_decrease: float = 0.25
    restart_every: int | None = None  # defaults to the parameter count

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be nonnegative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass(frozen=True)
class ScgStep:
    iteration: int
    value: float
    grad_norm: float
    lam: float
    success: bool
    comparison: float


@dataclass
class ScgResult:
    x: np.ndarray
    value: float
    converged: bool
    message: str
    trace: list[ScgStep] = field(default_factory=list)
    n_grad_evals: int = 0


def scg_minimize(objective: Objective, x0, config: ScgConfig = ScgConfig(),
                 callback: Callable[[ScgStep], None] | None = None) -> ScgResult:
    n_evals = 0

    def evaluate(w):
        nonlocal n_evals
        n_evals += 1
        f, g = objective(w)
        return float(f), np.asarray(g, dtype=np.float64)

    w = np.array(x0, dtype=np.float64)
    f, g = evaluate(w)
    trace: list[ScgStep] = []
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ScgError("objective is non-finite at the initial point", trace)
    n = w.size
    restart = config.restart_every or n
    r = -g
    p = r.copy()
    lam, lam_bar = config.lambda_init, 0.0
    success = True
    delta = 0.0
    trace.append(ScgStep(0, f, float(np.linalg.norm(r)), lam, True, float("nan")))
    if np.linalg.norm(r) <= config.grad_tol:
        return ScgResult(w, f, True, "gradient below tolerance", trace, n_evals)

    for k in range(1, config.max_iter + 1):
        p2 = float(p @ p)
        if p2 == 0.0:
            p, p2 = r.copy(), float(r @ r)
        if success:
            sig = config.sigma / np.sqrt(p2)
            _, g_sig = evaluate(w + sig * p)
            if not np.all(np.isfinite(g_sig)):
                raise ScgError(f"non-finite gradient at iteration {k}", trace)
            delta = float(p @ (g_sig + r)) / sig  # p . (g(w + sig p) - g(w)) / sig
        delta += (lam - lam_bar) * p2
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / p2)
            delta = -delta + lam * p2
            lam = lam_bar
        mu = float(p @ r)
        alpha = mu / delta
        f_new, g_new = evaluate(w + alpha * p)
        if not np.isfinite(f_new):
            raise ScgError(f"non-finite objective at iteration {k}", trace)
        decrease = f - f_new
        unresolved = abs(decrease) <= _UNRESOLVED * max(abs(f), abs(f_new))
        if unresolved and np.all(np.isfinite(g_new)):
            # difference lost in rounding: integrate the directional derivative instead
            decrease = -0.5 * alpha * float(p @ (g_new - r))
        comparison = 2.0 * delta * decrease / mu ** 2 if mu != 0 else -1.0
        # an unresolved step may raise the computed value by a few ulps
        if comparison >= 0 and (f_new <= f or unresolved):
            if not np.all(np.isfinite(g_new)):
                raise ScgError(f"non-finite gradient at iteration {k}", trace)
            w = w + alpha * p
            f = f_new
            r_new = -g_new
            lam_bar = 0.0
            success = True
            if k % restart == 0:
                p = r_new.copy()
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                p = r_new + beta * p
            r = r_new
            if comparison >= 0.75:
                lam *= config.lambda_decrease
        else:
            lam_bar = lam
            success = False
        if comparison < 0.25:
            lam += delta * (1.0 - comparison) / p2
        step = ScgStep(k, f, float(np.linalg.norm(r)), lam, success, float(comparison))
        trace.append(step)
        if callback is not None:
            callback(step)
        log.debug("scg %d f=%.6g |g|=%.3g lam=%.3g ok=%s", k, f, step.grad_norm, lam, step.success)
        if step.grad_norm <= config.grad_tol:
            return ScgResult(w, f, True, "gradient below tolerance", trace, n_evals)
    return ScgResult(w, f, False, "not converged: max iterations reached", trace, n_evals)
