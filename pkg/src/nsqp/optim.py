"""Limited-memory BFGS with Armijo backtracking.

The objective callable returns (value, gradient) for a flat real vector.
Steps are only ever accepted when they strictly reduce the value, so the
iterate sequence is monotone; if no acceptable step exists the solver
returns the best point found instead of raising.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    n_evals: int
    converged: bool
    # why the loop ended: "grad_tol", "max_iter" or "line_search"
    status: str


def _two_loop(grad: np.ndarray, pairs: deque) -> np.ndarray:
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(
    fun: Objective,
    x0: np.ndarray,
    *,
    memory: int = 10,
    max_iter: int = 5000,
    rel_grad_tol: float = 1e-8,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 40,
    callback: Optional[Callable[[int, float, float], None]] = None,
) -> LbfgsResult:
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    n_evals = 1
    pairs: deque = deque(maxlen=memory)
    status = "max_iter"
    it = 0

    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if callback is not None:
            callback(it - 1, f, gnorm)
        if gnorm <= rel_grad_tol * (1.0 + abs(f)):
            status = "grad_tol"
            it -= 1
            break

        d = _two_loop(g, pairs)
        slope = float(np.dot(g, d))
        if not np.isfinite(slope) or slope >= 0.0:
            pairs.clear()
            d = -g
            slope = -gnorm * gnorm

        t = 1.0
        accepted = False
        f_new = f
        g_new = g
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            t *= shrink
        if not accepted and pairs:
            # discard the curvature model and retry along steepest descent
            pairs.clear()
            d = -g
            slope = -gnorm * gnorm
            t = 1.0 / max(gnorm, 1.0)
            for _ in range(max_backtracks):
                x_new = x + t * d
                f_new, g_new = fun(x_new)
                n_evals += 1
                if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                    accepted = True
                    break
                t *= shrink
        if not accepted:
            status = "line_search"
            break

        s = t * d
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new

    gnorm = float(np.linalg.norm(g))
    converged = gnorm <= rel_grad_tol * (1.0 + abs(f))
    if converged:
        status = "grad_tol"
    return LbfgsResult(x=x, value=float(f), grad_norm=gnorm, iterations=it,
                       n_evals=n_evals, converged=converged, status=status)
