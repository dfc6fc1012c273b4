"""Time integration for the spectral vorticity-form momentum equation.

The state obeys

    du/dt = -nu * A u - sign * B(u, u) + f,

with A the Stokes operator and B the projected, dealiased advection term.
``sign=+1`` is the physical equation; ``sign=-1`` integrates the
time-reversed flow dv/dt = -nu * A v + B(v, v) - f, which transports a
state backwards along heteroclinic descent paths when run forward in its
own clock.

The stepper is a Heun (trapezoidal) rule applied after factoring out the
exact semigroup of the linear part:

    g1    = G(u_n)                      G(u) = f - sign * B(u, u)
    pred  = E (u_n + dt * g1)           E    = exp(-nu * lam * dt)
    u_new = E u_n + dt/2 * (E g1 + G(pred))

Linear decay is reproduced exactly; the explicit remainder is second
order in dt.  Solver state must live inside the grid's dealias mask (or
a caller-supplied submask of it) so that the quadratic term is an exact
Galerkin truncation; `solve_deterministic` checks this precondition once
rather than re-masking every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .spectral import (
    FourierField,
    NoiseOperator,
    SpectralGrid,
    _bilinear_core,
    save_field,
    scalars_to_field,
)
from .io_utils import write_csv

# dt * lam_max beyond this makes the explicit stage wildly inaccurate even
# though the integrating factor keeps it stable; treat as a config error.
STIFFNESS_LIMIT = 20.0

BLOWUP_FACTOR = 1.0e6


class BlowUpError(RuntimeError):
    """Trajectory norm exceeded the runaway guard."""

    def __init__(self, message: str, step: int, t: float, norm: float):
        super().__init__(message)
        self.step = step
        self.t = t
        self.norm = norm


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size and equation parameters for the semigroup-Heun stepper."""

    dt: float
    nu: float = 1.0
    nonlinear: bool = True

    def __post_init__(self):
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if not (self.nu > 0.0 and np.isfinite(self.nu)):
            raise ValueError(f"nu must be positive and finite, got {self.nu}")


_decay_cache: dict = {}


def decay_factors(grid: SpectralGrid, dt: float, nu: float) -> np.ndarray:
    """exp(-nu * lam * dt) on the full (N, N) lattice, cached."""
    key = (grid.L, grid.N, float(dt), float(nu))
    out = _decay_cache.get(key)
    if out is None:
        out = np.exp(-nu * dt * grid.lam)
        out.flags.writeable = False
        _decay_cache[key] = out
    return out


def check_stiffness(grid: SpectralGrid, cfg: IntegratorConfig,
                    mode_mask: Optional[np.ndarray] = None) -> None:
    lam = grid.lam[mode_mask] if mode_mask is not None else grid.lam[grid.dealias_mask]
    lam_max = float(lam.max()) if lam.size else 0.0
    if cfg.nu * cfg.dt * lam_max > STIFFNESS_LIMIT:
        raise ValueError(
            f"dt={cfg.dt} is too coarse for the retained modes: "
            f"nu*dt*lam_max = {cfg.nu * cfg.dt * lam_max:.3g} > {STIFFNESS_LIMIT}"
        )


def _rhs_explicit(grid: SpectralGrid, a: np.ndarray, f: Optional[np.ndarray],
                  sign: int, nonlinear: bool, mode_mask: np.ndarray) -> np.ndarray:
    if nonlinear:
        g = _bilinear_core(grid, a, a, mode_mask)
        if sign > 0:
            g = -g
        if f is not None:
            g = g + f
    else:
        g = np.zeros_like(a) if f is None else f.astype(np.complex128, copy=True)
    return g


def _step_arrays(grid: SpectralGrid, a: np.ndarray, cfg: IntegratorConfig,
                 f0: Optional[np.ndarray], f1: Optional[np.ndarray],
                 sign: int, mode_mask: np.ndarray) -> np.ndarray:
    decay = decay_factors(grid, cfg.dt, cfg.nu)
    g1 = _rhs_explicit(grid, a, f0, sign, cfg.nonlinear, mode_mask)
    pred = decay * (a + cfg.dt * g1)
    g2 = _rhs_explicit(grid, pred, f1, sign, cfg.nonlinear, mode_mask)
    return decay * a + (0.5 * cfg.dt) * (decay * g1 + g2)


def step_deterministic(u: FourierField, cfg: IntegratorConfig,
                       forcing=None, sign: int = 1,
                       mode_mask: Optional[np.ndarray] = None) -> FourierField:
    """One step.  `forcing` is None, a coefficient array (held fixed across
    the step), or a pair (f at t_n, f at t_{n+1})."""
    grid = u.grid
    mask = grid.dealias_mask if mode_mask is None else mode_mask
    if forcing is None:
        f0 = f1 = None
    elif isinstance(forcing, tuple):
        f0, f1 = forcing
    else:
        f0 = f1 = forcing
    out = _step_arrays(grid, u.coeffs, cfg, f0, f1, sign, mask)
    return FourierField._wrap(grid, out)


@dataclass
class PathGrid:
    """A discrete path: coefficient snapshots on a uniform time grid.

    `coeffs` has shape (n_nodes, 2, N, N) with node j at time t0 + j*dt.
    """

    grid: SpectralGrid
    t0: float
    t1: float
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.complex128)
        n = self.coeffs.shape[0]
        if self.coeffs.shape != (n, 2, self.grid.N, self.grid.N):
            raise ValueError(f"coeffs shape {self.coeffs.shape} does not match grid")
        if n < 2:
            raise ValueError("a path needs at least two nodes")
        if not (self.t1 > self.t0):
            raise ValueError(f"need t1 > t0, got [{self.t0}, {self.t1}]")

    @property
    def n_nodes(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.n_nodes - 1)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_nodes)

    def node(self, j: int) -> FourierField:
        """View of node j as a field (no copy; mutating it mutates the path)."""
        return FourierField._wrap(self.grid, self.coeffs[j])

    def norms_h(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.coeffs) ** 2, axis=(-3, -2, -1)))

    def norms_v(self) -> np.ndarray:
        w = np.abs(self.coeffs) ** 2 * self.grid.lam
        return np.sqrt(np.sum(w, axis=(-3, -2, -1)))

    def reversed(self) -> "PathGrid":
        return PathGrid(self.grid, -self.t1, -self.t0, self.coeffs[::-1])

    def restrict(self, j0: int, j1: int) -> "PathGrid":
        t = self.times
        return PathGrid(self.grid, float(t[j0]), float(t[j1]), self.coeffs[j0:j1 + 1])


def _node_count(t0: float, t1: float, dt: float) -> int:
    steps = (t1 - t0) / dt
    n = int(round(steps))
    if n < 1 or abs(steps - n) > 1e-8 * max(1.0, abs(steps)):
        raise ValueError(f"time span [{t0}, {t1}] is not an integer multiple of dt={dt}")
    return n + 1


def _check_in_mask(a: np.ndarray, mask: np.ndarray, what: str) -> None:
    outside = a * ~mask
    if np.any(np.abs(outside) > 0.0):
        raise ValueError(f"{what} has energy outside the retained mode set")


def solve_deterministic(u0: FourierField, t0: float, t1: float,
                        cfg: IntegratorConfig, forcing=None, sign: int = 1,
                        mode_mask: Optional[np.ndarray] = None) -> PathGrid:
    """Integrate from t0 to t1 and return the full path.

    `forcing` is None, a fixed coefficient array, or a callable t -> array
    evaluated at both endpoints of every step.  Raises BlowUpError if the
    H norm exceeds BLOWUP_FACTOR * max(1, |u0|_H).
    """
    grid = u0.grid
    mask = grid.dealias_mask if mode_mask is None else mode_mask
    check_stiffness(grid, cfg, mask)
    _check_in_mask(u0.coeffs, mask, "initial state")

    n_steps = _node_count(t0, t1, cfg.dt) - 1
    out = np.empty((n_steps + 1, 2, grid.N, grid.N), dtype=np.complex128)
    out[0] = u0.coeffs
    limit2 = (BLOWUP_FACTOR * max(1.0, u0.norm_h())) ** 2

    fixed_f = None
    f_callable = None
    if callable(forcing):
        f_callable = forcing
    elif forcing is not None:
        fixed_f = np.asarray(forcing, dtype=np.complex128)
        _check_in_mask(fixed_f, mask, "forcing")

    a = out[0].copy()
    for i in range(n_steps):
        if f_callable is not None:
            t = t0 + i * cfg.dt
            f0 = np.asarray(f_callable(t), dtype=np.complex128)
            f1 = np.asarray(f_callable(t + cfg.dt), dtype=np.complex128)
        else:
            f0 = f1 = fixed_f
        a = _step_arrays(grid, a, cfg, f0, f1, sign, mask)
        n2 = float(np.sum(np.abs(a) ** 2))
        if not np.isfinite(n2) or n2 > limit2:
            t = t0 + (i + 1) * cfg.dt
            raise BlowUpError(
                f"trajectory norm blew up at step {i + 1} (t={t:.6g})",
                step=i + 1, t=t, norm=float(np.sqrt(n2)),
            )
        out[i + 1] = a
    return PathGrid(grid, t0, t1, out)


# -- stochastic stepping ----------------------------------------------------

def sample_noise_scalars(grid: SpectralGrid, rng: np.random.Generator,
                         mode_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """One unit draw of the cylinder-Wiener increment in scalar form.

    Returns an (N, N) complex array g with g(-k) = -conj(g(k)) and
    independent unit-variance complex entries on the half lattice, so the
    vector field scalars_to_field(grid, g) has E |.|_H^2 = #(half modes).
    """
    mask = grid.active_mask if mode_mask is None else (mode_mask & grid.active_mask)
    ih, im, _ = grid.half_indices(mask)
    z = rng.standard_normal((2, ih.size))
    g = np.zeros((grid.N, grid.N), dtype=np.complex128)
    flat = g.reshape(-1)
    zc = (z[0] + 1j * z[1]) / np.sqrt(2.0)
    flat[ih] = zc
    flat[im] = -np.conj(zc)
    return g


def step_stochastic(u: FourierField, cfg: IntegratorConfig, noise: NoiseOperator,
                    eps: float, rng: np.random.Generator, forcing=None,
                    mode_mask: Optional[np.ndarray] = None) -> FourierField:
    """Deterministic step plus an additive increment with per-mode scalar
    variance eps * q_k^2 * dt.  With eps == 0 no random numbers are drawn,
    so the output is bitwise identical to the deterministic step."""
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    v = step_deterministic(u, cfg, forcing=forcing, sign=1, mode_mask=mode_mask)
    if eps == 0.0:
        return v
    grid = u.grid
    g = sample_noise_scalars(grid, rng, mode_mask)
    g *= noise.q * np.sqrt(eps * cfg.dt)
    return FourierField._wrap(grid, v.coeffs + scalars_to_field(grid, g))


# -- report output ----------------------------------------------------------

def write_trajectory_csv(path: PathGrid, out_path, stride: int = 1) -> None:
    """Columns: t, h_norm, v_norm."""
    t = path.times[::stride]
    h = path.norms_h()[::stride]
    v = path.norms_v()[::stride]
    write_csv(out_path, ["t", "h_norm", "v_norm"],
              [(t[i], h[i], v[i]) for i in range(t.size)])


def dump_snapshots(path: PathGrid, out_dir, stride: int = 1) -> list:
    """Write every stride-th node as a field file; returns the file names."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    names = []
    for j in range(0, path.n_nodes, stride):
        name = os.path.join(out_dir, f"snapshot_{j:06d}.nsqf")
        save_field(path.node(j), name)
        names.append(name)
    return names
