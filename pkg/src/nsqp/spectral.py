"""Spectral representation of mean-zero, divergence-free velocity fields on a
periodic box, and the operators everything else in the package is built from.

Conventions, fixed once and shared by every module:

* A field u on [0, L)^2 is stored as complex coefficients ``c[i, jx, jy]`` of
  the Fourier series ``u_i(x) = sum_k c_i[k] exp(2 pi i k.x / L)``, with the
  integer wave vector k in numpy FFT layout (``kx = fftfreq(N) * N`` along
  axis -2, ``ky`` along axis -1) and component i in {x, y}.
* Inner product: ``<u, v>_H = Re sum_k c(u)_k . conj(c(v)_k)``.  This equals
  the physical-space average ``(1/L^2) int u . v dx``, so all norms here are
  mean-square norms.  With this choice the Stokes operator acts diagonally
  with eigenvalues ``lam_k = (2 pi / L)^2 |k|^2`` and the smallest retained
  eigenvalue is ``lam_1 = 4 pi^2 / L^2``.
* The mean (k = 0) mode is excluded from the state; constructors and
  operators force it to zero.
* Quadratic terms are dealiased with the strict 2/3 rule: only modes with
  ``max(|k_x|, |k_y|) <= (N - 1) // 3`` are retained, which makes products of
  retained modes alias-free against retained test modes on the N x N
  collocation grid (for N divisible by 3 the naive floor(N/3) cutoff is not
  alias-safe, hence the -1).

Real fields are kept Hermitian-symmetric, ``c[-k] = conj(c[k])``.  A
divergence-free field carries one complex scalar per mode through the
helicity-free decomposition ``c_k = a_k * e_k`` with the real unit vector
``e_k = k_perp / |k|``; `field_to_scalars` / `scalars_to_field` convert
between the two pictures and are used by the samplers and the path optimizer.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "SpectralGrid",
    "FourierField",
    "NoiseOperator",
    "make_grid",
    "make_noise",
    "reflect_modes",
    "hermitian_part",
    "leray_project",
    "stokes_apply",
    "bilinear_B",
    "trilinear_b",
    "dense_advect_reference",
    "q_apply",
    "norm_h",
    "norm_v",
    "norm_frac",
    "inner_h",
    "random_field",
    "field_from_mode_pairs",
    "save_field",
    "load_field",
]


def reflect_modes(a: np.ndarray) -> np.ndarray:
    """Return the array with every mode k mapped to -k (numpy FFT layout)."""
    return np.roll(a[..., ::-1, ::-1], shift=1, axis=(-2, -1))


def hermitian_part(a: np.ndarray) -> np.ndarray:
    """Project coefficients onto the Hermitian subspace c[-k] = conj(c[k])."""
    return 0.5 * (a + np.conj(reflect_modes(a)))


class SpectralGrid:
    """Wave-vector bookkeeping for an N x N truncation of the torus [0, L)^2.

    Attributes:
        L, N: box side and modes per dimension (N even, >= 4).
        kx, ky: integer wave-vector components, shape (N, N), FFT layout.
        k2: |k|^2, shape (N, N).
        lam: Stokes eigenvalues (2 pi / L)^2 |k|^2, zero at k = 0.
        lam_1: smallest retained eigenvalue, 4 pi^2 / L^2.
        dealias_mask: strict 2/3-rule mask, True on retained product modes.
        nonzero_mask: True away from k = 0.
        active_mask: dealias_mask with the zero mode removed; the state
            always lives inside this set.
        ehat: unit divergence-free direction k_perp / |k|, shape (2, N, N).
        half_mask: canonical representatives of the +-k pairs inside
            active_mask (kx > 0, or kx = 0 and ky > 0).
    """

    def __init__(self, L: float, N: int):
        if not (isinstance(N, (int, np.integer)) and N >= 4 and N % 2 == 0):
            raise ValueError(f"N must be an even integer >= 4, got {N!r}")
        if not (L > 0.0 and np.isfinite(L)):
            raise ValueError(f"L must be a positive finite float, got {L!r}")
        self.L = float(L)
        self.N = int(N)

        k = np.rint(np.fft.fftfreq(N) * N).astype(np.int64)
        self.kx, self.ky = np.meshgrid(k, k, indexing="ij")
        self.k2 = self.kx**2 + self.ky**2
        self.lam = (2.0 * np.pi / self.L) ** 2 * self.k2.astype(np.float64)
        self.lam_1 = 4.0 * np.pi**2 / self.L**2

        kcut = (N - 1) // 3
        self.kcut = kcut
        self.dealias_mask = (np.abs(self.kx) <= kcut) & (np.abs(self.ky) <= kcut)
        self.nonzero_mask = self.k2 > 0
        self.active_mask = self.dealias_mask & self.nonzero_mask
        # the FFT lattice carries -N/2 but not +N/2; that unpaired line cannot
        # hold a Hermitian vector field, so it is excluded from the state
        self.state_mask = (
            self.nonzero_mask & (np.abs(self.kx) < N // 2) & (np.abs(self.ky) < N // 2)
        )

        kmag = np.sqrt(self.k2.astype(np.float64))
        kmag[0, 0] = 1.0  # avoid 0/0 at the excluded mean mode
        self.ehat = np.stack([-self.ky / kmag, self.kx / kmag])
        self.ehat[:, 0, 0] = 0.0

        self.half_mask = (self.kx > 0) | ((self.kx == 0) & (self.ky > 0))
        self._deriv = (2j * np.pi / self.L) * np.stack(
            [self.kx.astype(np.float64), self.ky.astype(np.float64)]
        )

    @property
    def lam_max_active(self) -> float:
        return float(self.lam[self.active_mask].max())

    def lam_pow(self, gamma: float) -> np.ndarray:
        """lam^gamma with the k = 0 entry forced to 0 (safe for gamma < 0)."""
        if gamma == 1.0:
            return self.lam
        base = np.where(self.nonzero_mask, self.lam, 1.0)
        out = base**gamma
        return np.where(self.nonzero_mask, out, 0.0)

    def half_indices(self, mask: Optional[np.ndarray] = None):
        """Flat indices (half, mirror) of the +-k pairs inside ``mask``.

        Returns (idx_half, idx_mirror, e_half) where e_half has shape
        (2, n_half) and idx arrays index the flattened (N, N) mode plane.
        """
        if mask is None:
            mask = self.active_mask
        sel = mask & self.half_mask
        idx_half = np.flatnonzero(sel)
        ix, iy = np.unravel_index(idx_half, (self.N, self.N))
        mx, my = (-ix) % self.N, (-iy) % self.N
        idx_mirror = np.ravel_multi_index((mx, my), (self.N, self.N))
        e_half = self.ehat.reshape(2, -1)[:, idx_half]
        return idx_half, idx_mirror, e_half

    def __eq__(self, other) -> bool:
        return isinstance(other, SpectralGrid) and (self.L, self.N) == (other.L, other.N)

    def __hash__(self) -> int:
        return hash((self.L, self.N))

    def __repr__(self) -> str:
        return f"SpectralGrid(L={self.L!r}, N={self.N})"


def make_grid(L: float, N: int) -> SpectralGrid:
    """Build the spectral grid for an N x N truncation of [0, L)^2."""
    return SpectralGrid(L, N)


# ---------------------------------------------------------------------------
# array-level cores; coefficients of shape (..., 2, N, N), batched over any
# leading axes.  All of these assume complex128 input.


def to_physical(grid: SpectralGrid, c: np.ndarray) -> np.ndarray:
    """Collocation samples of the field on the N x N grid (real part)."""
    return np.fft.ifft2(c, axes=(-2, -1)).real * grid.N**2


def from_physical(grid: SpectralGrid, p: np.ndarray) -> np.ndarray:
    """Fourier coefficients of collocation samples (exact for band-limited)."""
    return np.fft.fft2(p, axes=(-2, -1)) / grid.N**2


def _leray_core(grid: SpectralGrid, c: np.ndarray) -> np.ndarray:
    k2 = np.where(grid.nonzero_mask, grid.k2, 1).astype(np.float64)
    kdot = grid.kx * c[..., 0, :, :] + grid.ky * c[..., 1, :, :]
    frac = kdot / k2
    out = np.empty_like(c)
    out[..., 0, :, :] = c[..., 0, :, :] - frac * grid.kx
    out[..., 1, :, :] = c[..., 1, :, :] - frac * grid.ky
    out[..., :, 0, 0] = 0.0
    return out


def _advect_core(
    grid: SpectralGrid, cu: np.ndarray, cv: np.ndarray
) -> np.ndarray:
    """Coefficients of (u . grad) v by collocation; no masking or projection."""
    up = to_physical(grid, cu)
    dvdx = to_physical(grid, grid._deriv[0] * cv)
    dvdy = to_physical(grid, grid._deriv[1] * cv)
    w = up[..., 0:1, :, :] * dvdx + up[..., 1:2, :, :] * dvdy
    return from_physical(grid, w)


def _bilinear_core(
    grid: SpectralGrid, cu: np.ndarray, cv: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Masked, projected B(u, v); inputs assumed supported inside ``mask``."""
    return _leray_core(grid, _advect_core(grid, cu, cv) * mask)


def grad_transpose_core(
    grid: SpectralGrid, cu: np.ndarray, ch: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Masked, projected (grad u)^T h, the advection part of B's adjoint."""
    dudx = to_physical(grid, grid._deriv[0] * cu)
    dudy = to_physical(grid, grid._deriv[1] * cu)
    hp = to_physical(grid, ch)
    tx = np.sum(hp * dudx, axis=-3)
    ty = np.sum(hp * dudy, axis=-3)
    w = np.stack([tx, ty], axis=-3)
    return _leray_core(grid, from_physical(grid, w) * mask)


def scalars_to_field(
    grid: SpectralGrid, a: np.ndarray
) -> np.ndarray:
    """Expand per-mode scalars a_k into coefficients a_k * e_k."""
    return a[..., None, :, :] * grid.ehat


def field_to_scalars(grid: SpectralGrid, c: np.ndarray) -> np.ndarray:
    """Per-mode scalar a_k = e_k . c_k (inverse of scalars_to_field on
    divergence-free fields)."""
    return np.sum(c * grid.ehat, axis=-3)


# ---------------------------------------------------------------------------
# field type


class FourierField:
    """A mean-zero, divergence-free velocity field in coefficient form.

    Construction symmetrizes the coefficients (Hermitian part), kills the
    k = 0 mode, and rejects input whose divergence exceeds 1e-12 relative to
    the per-mode magnitude.  Use `leray_project` first for arbitrary input.
    """

    __slots__ = ("grid", "coeffs")

    DIV_TOL = 1e-12

    def __init__(self, grid: SpectralGrid, coeffs: np.ndarray, *, enforce: bool = True):
        c = np.asarray(coeffs, dtype=np.complex128)
        if c.shape != (2, grid.N, grid.N):
            raise ValueError(
                f"coefficient shape {c.shape} does not match grid (2, {grid.N}, {grid.N})"
            )
        if enforce:
            c = hermitian_part(c * grid.state_mask)
            kdot = np.abs(grid.kx * c[0] + grid.ky * c[1])
            scale = np.sqrt(grid.k2) * np.sqrt(np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2)
            if np.any(kdot > self.DIV_TOL * scale + 1e-300):
                worst = float((kdot / (scale + 1e-300)).max())
                raise ValueError(
                    f"field is not divergence-free: max |k.c_k| / (|k||c_k|) = {worst:.3e}"
                )
        else:
            c = np.array(c, copy=True)
        self.grid = grid
        self.coeffs = c

    @classmethod
    def _wrap(cls, grid: SpectralGrid, coeffs: np.ndarray) -> "FourierField":
        """Trusted constructor: takes ownership, no checks, no copy."""
        obj = object.__new__(cls)
        obj.grid = grid
        obj.coeffs = coeffs
        return obj

    @classmethod
    def zero(cls, grid: SpectralGrid) -> "FourierField":
        return cls._wrap(grid, np.zeros((2, grid.N, grid.N), dtype=np.complex128))

    @classmethod
    def from_scalars(cls, grid: SpectralGrid, a: np.ndarray) -> "FourierField":
        """Field a_k * e_k from per-mode scalars; a must satisfy
        a[-k] = -conj(a[k]) for the result to be a real field (the helpers in
        this module always produce that symmetry)."""
        return cls._wrap(grid, scalars_to_field(grid, np.asarray(a, np.complex128)))

    def copy(self) -> "FourierField":
        return FourierField._wrap(self.grid, self.coeffs.copy())

    def norm_h(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def norm_v(self) -> float:
        return float(np.sqrt(np.sum(self.grid.lam * np.abs(self.coeffs) ** 2)))

    def norm_frac(self, gamma: float) -> float:
        w = self.grid.lam_pow(gamma)
        return float(np.sqrt(np.sum(w * np.abs(self.coeffs) ** 2)))

    def to_physical(self) -> np.ndarray:
        return to_physical(self.grid, self.coeffs)

    def __add__(self, other: "FourierField") -> "FourierField":
        return FourierField._wrap(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "FourierField") -> "FourierField":
        return FourierField._wrap(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "FourierField":
        return FourierField._wrap(self.grid, self.coeffs * s)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return (
            f"FourierField(N={self.grid.N}, |u|_H={self.norm_h():.6g}, "
            f"|u|_V={self.norm_v():.6g})"
        )


def inner_h(u: FourierField, v: FourierField) -> float:
    """H inner product Re sum_k c(u)_k . conj(c(v)_k)."""
    return float(np.real(np.vdot(v.coeffs, u.coeffs)))


def norm_h(u: FourierField) -> float:
    return u.norm_h()


def norm_v(u: FourierField) -> float:
    return u.norm_v()


def norm_frac(u: FourierField, gamma: float) -> float:
    return u.norm_frac(gamma)


# ---------------------------------------------------------------------------
# operators


def leray_project(u: FourierField) -> FourierField:
    """Project onto divergence-free fields: c_k -> c_k - k (k.c_k) / |k|^2."""
    return FourierField._wrap(u.grid, _leray_core(u.grid, u.coeffs))


def stokes_apply(u: FourierField, gamma: float = 1.0) -> FourierField:
    """Apply A^gamma, the fractional Stokes operator (diagonal, lam_k^gamma)."""
    return FourierField._wrap(u.grid, u.grid.lam_pow(gamma) * u.coeffs)


def bilinear_B(u: FourierField, v: FourierField, dealias: bool = True) -> FourierField:
    """Projected advection B(u, v) = P (u . grad) v, pseudo-spectrally.

    Inputs are masked to the 2/3 set before the collocation product and the
    output is masked again, so retained-mode content is the exact convolution.
    ``dealias=False`` skips both masks; it exists to demonstrate how the
    energy identities fail on aliased products and is not used by the solvers.
    """
    grid = u.grid
    if dealias:
        m = grid.dealias_mask
        w = _advect_core(grid, u.coeffs * m, v.coeffs * m) * m
    else:
        w = _advect_core(grid, u.coeffs, v.coeffs)
    w = _leray_core(grid, w)
    w[:, 0, 0] = 0.0
    return FourierField._wrap(grid, w)


def trilinear_b(
    u: FourierField, v: FourierField, w: FourierField, dealias: bool = True
) -> float:
    """b(u, v, w) = <B(u, v), w>_H."""
    return inner_h(bilinear_B(u, v, dealias=dealias), w)


def dense_advect_reference(
    grid: SpectralGrid, u: FourierField, v: FourierField
) -> FourierField:
    """O(N^4) direct-convolution reference for B(u, v).

    Sums (u_p . (2 pi i q / L)) v_q over all mode pairs with p + q = k,
    dropping sums that leave the representable lattice (so it is alias-free
    by construction), then applies the same mask and projection as
    `bilinear_B`.  Quadratic cost in the number of modes squared; intended
    for small N as an independent check of the collocation product.
    """
    N = grid.N
    kint = np.rint(np.fft.fftfreq(N) * N).astype(np.int64)
    cu = u.coeffs * grid.dealias_mask
    cv = v.coeffs * grid.dealias_mask
    out = np.zeros((2, N, N), dtype=np.complex128)
    fac = 2j * np.pi / grid.L
    for pi in range(N):
        for pj in range(N):
            up = cu[:, pi, pj]
            if up[0] == 0 and up[1] == 0:
                continue
            for qi in range(N):
                for qj in range(N):
                    vq = cv[:, qi, qj]
                    if vq[0] == 0 and vq[1] == 0:
                        continue
                    sx = kint[pi] + kint[qi]
                    sy = kint[pj] + kint[qj]
                    if not (-N // 2 <= sx < N // 2 and -N // 2 <= sy < N // 2):
                        continue
                    coef = fac * (up[0] * kint[qi] + up[1] * kint[qj])
                    out[:, sx % N, sy % N] += coef * vq
    out *= grid.dealias_mask
    out = _leray_core(grid, out)
    out[:, 0, 0] = 0.0
    return FourierField._wrap(grid, out)


class NoiseOperator:
    """Diagonal mollifier Q_delta = (I + delta A^(beta/2))^-1.

    Attributes:
        q: per-mode multiplier (1 + delta lam_k^(beta/2))^-1, defined as the
            exact float reciprocal of q_inv so the round-trip multiplier
            q * q_inv deviates from 1 by at most one ulp.
        q_inv: per-mode multiplier of Q_delta^-1.
    """

    def __init__(self, grid: SpectralGrid, delta: float, beta: float = 2.0):
        if delta < 0.0 or not np.isfinite(delta):
            raise ValueError(f"delta must be >= 0, got {delta!r}")
        if beta <= 0.0 or not np.isfinite(beta):
            raise ValueError(f"beta must be > 0, got {beta!r}")
        self.grid = grid
        self.delta = float(delta)
        self.beta = float(beta)
        self.q_inv = 1.0 + delta * grid.lam_pow(beta / 2.0)
        self.q = 1.0 / self.q_inv

    def apply(self, u: FourierField, inverse: bool = False) -> FourierField:
        mult = self.q_inv if inverse else self.q
        return FourierField._wrap(self.grid, mult * u.coeffs)

    def trace_diagnostic(self) -> float:
        """sum over retained modes of q_k^2 / lam_k (trace-class surrogate)."""
        m = self.grid.active_mask
        return float(np.sum(self.q[m] ** 2 / self.grid.lam[m]))

    def __repr__(self) -> str:
        return f"NoiseOperator(delta={self.delta!r}, beta={self.beta!r})"


def make_noise(grid: SpectralGrid, delta: float, beta: float = 2.0) -> NoiseOperator:
    return NoiseOperator(grid, delta, beta)


def q_apply(noise: NoiseOperator, u: FourierField, inverse: bool = False) -> FourierField:
    """Apply Q_delta (or its inverse) to a field."""
    return noise.apply(u, inverse=inverse)


# ---------------------------------------------------------------------------
# constructors for test/experiment fields


def antihermitian_scalars(grid: SpectralGrid, g: np.ndarray) -> np.ndarray:
    """Project per-mode scalars onto a[-k] = -conj(a[k]) (real fields)."""
    return 0.5 * (g - np.conj(reflect_modes(g)))


def random_field(
    grid: SpectralGrid,
    rng: np.random.Generator,
    amplitude: float = 1.0,
    kmax: Optional[int] = None,
    decay: float = 2.0,
) -> FourierField:
    """Random dealiased field with |u|_H = amplitude.

    Per-mode scalars are complex Gaussians shaped by (1 + |k|^2)^(-decay/2),
    restricted to max(|k_x|, |k_y|) <= kmax (default: the 2/3 cut).
    """
    g = rng.standard_normal((grid.N, grid.N)) + 1j * rng.standard_normal(
        (grid.N, grid.N)
    )
    a = antihermitian_scalars(grid, g)
    sel = grid.active_mask.copy()
    if kmax is not None:
        sel &= (np.abs(grid.kx) <= kmax) & (np.abs(grid.ky) <= kmax)
    a = np.where(sel, a, 0.0)
    a *= (1.0 + grid.k2) ** (-decay / 2.0)
    nrm = np.sqrt(np.sum(np.abs(a) ** 2))
    if nrm == 0.0:
        raise ValueError("empty mode selection for random field")
    a *= amplitude / nrm
    return FourierField.from_scalars(grid, a)


def field_from_mode_pairs(
    grid: SpectralGrid,
    modes: Sequence[Sequence[int]],
    amplitudes: Sequence[float],
) -> FourierField:
    """Field sum_i amp_i * E_{k_i} with E_k the unit-H-norm real field of the
    +-k pair (scalars 1/sqrt(2) at k, -1/sqrt(2) at -k).

    Modes are integer pairs inside the dealiased set; amplitudes are real, so
    distinct pairs are H-orthonormal directions and |u|_H^2 = sum amp_i^2.
    """
    if len(modes) != len(amplitudes):
        raise ValueError("modes and amplitudes must have the same length")
    a = np.zeros((grid.N, grid.N), dtype=np.complex128)
    for (mx, my), amp in zip(modes, amplitudes):
        mx, my = int(mx), int(my)
        if mx == 0 and my == 0:
            raise ValueError("the zero mode is excluded from the state")
        i, j = mx % grid.N, my % grid.N
        if not grid.dealias_mask[i, j]:
            raise ValueError(f"mode ({mx}, {my}) lies outside the dealiased set")
        a[i, j] += amp / np.sqrt(2.0)
        a[(-mx) % grid.N, (-my) % grid.N] += -amp / np.sqrt(2.0)
    return FourierField.from_scalars(grid, a)


# ---------------------------------------------------------------------------
# serialization
#
# Byte layout (little-endian), version 1:
#   offset 0   4 bytes   magic b"NSQF"
#   offset 4   u32       format version (= 1)
#   offset 8   f64       box side L
#   offset 16  u32       modes per dimension N
#   offset 20  u32       number of components (= 2)
#   offset 24  ...       2 * N * N complex128 coefficients, C row-major over
#                        (component, kx index, ky index), each as (re, im)
#                        float64 pairs; mode indices in numpy FFT order.

_MAGIC = b"NSQF"
_VERSION = 1
_HEADER = struct.Struct("<4sIdII")


def save_field(u: FourierField, path) -> None:
    """Write a field in the versioned binary layout documented above."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, u.grid.L, u.grid.N, 2))
        fh.write(np.ascontiguousarray(u.coeffs, dtype=np.complex128).tobytes())


def load_field(path, grid: Optional[SpectralGrid] = None) -> FourierField:
    """Read a field written by `save_field`; builds the grid unless given."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated field header")
        magic, version, L, N, ncomp = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field file (bad magic {magic!r})")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported field format version {version}")
        if ncomp != 2:
            raise ValueError(f"{path}: expected 2 components, found {ncomp}")
        raw = fh.read(2 * N * N * 16)
        if len(raw) < 2 * N * N * 16:
            raise ValueError(f"{path}: truncated coefficient block")
    coeffs = np.frombuffer(raw, dtype=np.complex128).reshape(2, N, N)
    if grid is None:
        grid = make_grid(L, N)
    elif (grid.L, grid.N) != (L, N):
        raise ValueError(
            f"{path}: stored grid (L={L}, N={N}) does not match the given one"
        )
    return FourierField(grid, coeffs)
