"""Limited-memory BFGS with a backtracking Armijo line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

ObjectiveFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str


def two_loop_direction(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """Approximate ``-H^{-1} g`` from the stored curvature pairs."""
    q = grad.copy()
    alphas = []
    rhos = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
        rhos.append(rho)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), a, rho in zip(zip(s_hist, y_hist), reversed(alphas), reversed(rhos)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def minimize(
    fun: ObjectiveFn,
    x0,
    memory: int = 10,
    max_iter: int = 500,
    gtol: float = 1e-9,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
) -> LBFGSResult:
    """Minimise ``fun`` (returning value and gradient) from ``x0``."""
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return LBFGSResult(x, float(f), float("inf"), 0, False, "non-finite at start")
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            return LBFGSResult(x, f, gnorm, it, True, "gradient norm below tolerance")
        d = two_loop_direction(g, s_hist, y_hist)
        slope = float(g @ d)
        if slope >= 0:
            # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = -gnorm * gnorm
        step = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= shrink
        else:
            return LBFGSResult(x, f, gnorm, it, False, "line search failed")
        s = x_new - x
        y = g_new - g
        if float(s @ y) > 1e-300:
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
    gnorm = float(np.linalg.norm(g))
    return LBFGSResult(x, f, gnorm, max_iter, gnorm < gtol, "iteration limit")
