"""Discrete rate functional for paths of the stochastically forced flow.

For a path u on a uniform time grid the control cost is

    S[u] = 1/2 * sum_j c_j |Q^{-1} f_j|_H^2,
    f_j  = (D_t u)_j + A u_j + B(u_j, u_j),

with c_j = dt * w_j the composite-trapezoid weights and D_t the
second-order difference stencil (centered inside, one-sided at the two
ends).  Q is the diagonal noise shaping operator, so the integrand is

    sum_k (1 + delta * lam_k^{beta/2})^2 |f_hat_k|^2.

Because <A u, B(u, u)>_H = 0, the unshaped functional splits exactly as

    S_0[u] = 1/2 int |u' - A u + B(u, u)|_H^2 dt
             + |u(t1)|_V^2 - |u(t0)|_V^2;

`action_decomposition` evaluates both sides with the same stencil and
quadrature and reports the leftover, which shrinks as O(dt^2) for smooth
paths.  This split is what makes the reverse-flow path the natural
minimizer candidate: its first term vanishes.

All node arrays are assumed to live inside the grid's dealias mask (or
the caller's truncation mask); see `dynamics` for the precondition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import PathGrid
from .io_utils import write_csv
from .spectral import NoiseOperator, SpectralGrid, _bilinear_core, grad_transpose_core


def trapezoid_weights(n_nodes: int, dt: float) -> np.ndarray:
    if n_nodes < 2:
        raise ValueError("quadrature needs at least two nodes")
    c = np.full(n_nodes, dt)
    c[0] = c[-1] = 0.5 * dt
    return c


def time_derivative(coeffs: np.ndarray, dt: float) -> np.ndarray:
    """Second-order D_t along axis 0; needs at least three nodes."""
    if coeffs.shape[0] < 3:
        raise ValueError("difference stencil needs at least three nodes")
    out = np.empty_like(coeffs)
    out[1:-1] = (coeffs[2:] - coeffs[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * coeffs[0] + 4.0 * coeffs[1] - coeffs[2]) / (2.0 * dt)
    out[-1] = (3.0 * coeffs[-1] - 4.0 * coeffs[-2] + coeffs[-3]) / (2.0 * dt)
    return out


def time_derivative_adjoint(h: np.ndarray, dt: float) -> np.ndarray:
    """Transpose of `time_derivative` in the real (Frobenius) pairing."""
    if h.shape[0] < 3:
        raise ValueError("difference stencil needs at least three nodes")
    g = np.zeros_like(h)
    g[2:] += h[1:-1]
    g[:-2] -= h[1:-1]
    g[0] += -3.0 * h[0]
    g[1] += 4.0 * h[0]
    g[2] += -h[0]
    g[-1] += 3.0 * h[-1]
    g[-2] += -4.0 * h[-1]
    g[-3] += h[-1]
    g /= 2.0 * dt
    return g


def path_residuals(path: PathGrid, nonlinear: bool = True,
                   mode_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-node drift mismatch f_j = (D_t u)_j + A u_j + B(u_j, u_j)."""
    grid = path.grid
    mask = grid.dealias_mask if mode_mask is None else mode_mask
    f = time_derivative(path.coeffs, path.dt) + grid.lam * path.coeffs
    if nonlinear:
        f = f + _bilinear_core(grid, path.coeffs, path.coeffs, mask)
    return f


def _shaped_node_squares(grid: SpectralGrid, f: np.ndarray,
                         qinv2: np.ndarray) -> np.ndarray:
    return np.sum(qinv2 * np.abs(f) ** 2, axis=(-3, -2, -1))


def action_value(path: PathGrid, delta: float, beta: float = 2.0,
                 nonlinear: bool = True,
                 mode_mask: Optional[np.ndarray] = None) -> float:
    f = path_residuals(path, nonlinear, mode_mask)
    qinv2 = NoiseOperator(path.grid, delta, beta).q_inv ** 2
    sq = _shaped_node_squares(path.grid, f, qinv2)
    c = trapezoid_weights(path.n_nodes, path.dt)
    return float(0.5 * np.dot(c, sq))


def residual_profile(path: PathGrid, delta: float, beta: float = 2.0,
                     nonlinear: bool = True,
                     mode_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """|Q^{-1} f_j|_H per node, the pointwise integrand square root."""
    f = path_residuals(path, nonlinear, mode_mask)
    qinv2 = NoiseOperator(path.grid, delta, beta).q_inv ** 2
    return np.sqrt(_shaped_node_squares(path.grid, f, qinv2))


@dataclass(frozen=True)
class ActionBreakdown:
    """Two evaluations of the exact splitting of the unshaped action."""

    t0: float
    t1: float
    dt: float
    delta: float
    total: float
    residual_reverse: float
    boundary_gain: float
    defect: float


def action_decomposition(path: PathGrid, nonlinear: bool = True,
                         mode_mask: Optional[np.ndarray] = None) -> ActionBreakdown:
    """Evaluate S_0, its reverse-residual form, and the quadrature defect."""
    grid = path.grid
    mask = grid.dealias_mask if mode_mask is None else mode_mask
    du = time_derivative(path.coeffs, path.dt)
    lin = grid.lam * path.coeffs
    adv = _bilinear_core(grid, path.coeffs, path.coeffs, mask) if nonlinear else 0.0
    c = trapezoid_weights(path.n_nodes, path.dt)

    sq_fwd = np.sum(np.abs(du + lin + adv) ** 2, axis=(-3, -2, -1))
    sq_rev = np.sum(np.abs(du - lin + adv) ** 2, axis=(-3, -2, -1))
    total = float(0.5 * np.dot(c, sq_fwd))
    residual_reverse = float(0.5 * np.dot(c, sq_rev))
    v2 = path.norms_v() ** 2
    boundary_gain = float(v2[-1] - v2[0])
    return ActionBreakdown(
        t0=path.t0, t1=path.t1, dt=path.dt, delta=0.0,
        total=total, residual_reverse=residual_reverse,
        boundary_gain=boundary_gain,
        defect=total - residual_reverse - boundary_gain,
    )


def write_breakdown_csv(rows, out_path) -> None:
    write_csv(out_path,
              ["t0", "t1", "dt", "delta", "total", "residual_reverse",
               "boundary_gain", "defect"],
              [(r.t0, r.t1, r.dt, r.delta, r.total, r.residual_reverse,
                r.boundary_gain, r.defect) for r in rows])


# -- fused value and gradient -----------------------------------------------

def action_and_field_grad(grid: SpectralGrid, coeffs: np.ndarray, dt: float,
                          qinv2: np.ndarray, nonlinear: bool,
                          mask: np.ndarray):
    """Action of the node array plus its gradient with respect to every
    node, in the real H pairing restricted to divergence-free fields.

    With h_j = c_j Q^{-2} f_j the gradient field is

        G_m = (D_t^T h)_m + A h_m + P[(grad u_m)^T h_m] - B(u_m, h_m),

    the last two terms being the transpose of w -> B(w, u) + B(u, w).
    Directional derivatives against it are exact only for perturbations
    that are Hermitian, divergence free and supported in ``mask``, which
    is the search space the minimizer uses.  `coeffs` must already be
    masked; nothing is re-masked here.
    """
    n = coeffs.shape[0]
    du = time_derivative(coeffs, dt)
    f = du + grid.lam * coeffs
    if nonlinear:
        f += _bilinear_core(grid, coeffs, coeffs, mask)
    c = trapezoid_weights(n, dt)
    sq = np.sum(qinv2 * np.abs(f) ** 2, axis=(-3, -2, -1))
    value = float(0.5 * np.dot(c, sq))

    h = f
    h *= qinv2
    h *= c[:, None, None, None]
    grad = time_derivative_adjoint(h, dt) + grid.lam * h
    if nonlinear:
        grad += grad_transpose_core(grid, coeffs, h, mask)
        grad -= _bilinear_core(grid, coeffs, h, mask)
    return value, grad
