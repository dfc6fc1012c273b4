"""Monte Carlo first-exit times from a ball around the rest state.

Trajectories of the noise-driven flow, restricted to a small set of
retained mode pairs, start at a state inside the ball and run until the
H norm first reaches the exit radius.  Exit times at small noise are
exponentially large, so the engine avoids per-step transform work
entirely:

* with the quadratic term off, the chain is an exact diagonal recursion;
  whole blocks of steps are evaluated at once from the closed form
  s_j = d^{j+1} s_init + d^j sum_i d^{-i} sigma xi_i;
* with it on, B restricted to the retained pairs is a fixed quadratic
  form in the packed scalars; its coefficient tensor is probed once from
  the dealiased transform core and evaluated per step with one einsum.

Every trajectory owns a counter-based generator keyed by
(master_seed, row * n_samples + sample_index) and draws noise in fixed
blocks from that stream alone, so results are bitwise independent of
chunk size and worker count, and reruns reproduce output files byte for
byte.

`mean_tau` averages exited samples only; censored runs are counted and
flagged (the estimate is biased low whenever censoring occurred), and
blow-ups are excluded as failed samples.  Confidence intervals and the
uncertainty of the fitted slope of 1/eps -> log mean both come from a
seeded bootstrap.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .spectral import (
    NoiseOperator,
    SpectralGrid,
    _bilinear_core,
    field_to_scalars,
    make_grid,
    scalars_to_field,
)
from .io_utils import write_csv

EXITED = 0
CENSORED = 1
BLOWUP = 2

_ROW_STREAM_OFFSET = 2 ** 62  # bootstrap streams live far from trajectory keys

# beyond this many retained pairs the probed-tensor shortcut stops paying
_TENSOR_PAIR_LIMIT = 24


def truncation_mask(grid: SpectralGrid, modes: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Boolean (N, N) mask holding the listed conjugate pairs."""
    if len(modes) == 0:
        raise ValueError("need at least one retained mode pair")
    mask = np.zeros((grid.N, grid.N), dtype=bool)
    for kx, ky in modes:
        if kx == 0 and ky == 0:
            raise ValueError("zero mode cannot be retained")
        i, j = kx % grid.N, ky % grid.N
        if not grid.dealias_mask[i, j]:
            raise ValueError(f"mode {(kx, ky)} is outside the dealiased set")
        mask[i, j] = True
        mask[-kx % grid.N, -ky % grid.N] = True
    return mask


@dataclass(frozen=True)
class ExitConfig:
    """Sampling plan for one exit-time scan.

    The start state is given as mode pairs plus amplitudes (see
    `field_from_mode_pairs`); it must lie strictly inside the exit ball
    and inside the retained mode set.  An empty pair list starts at rest.
    """

    radius: float
    eps_list: Tuple[float, ...]
    dt: float
    t_max: float
    n_samples: int
    master_seed: int
    modes: Tuple[Tuple[int, int], ...] = ((1, 0),)
    start_modes: Tuple[Tuple[int, int], ...] = ()
    start_amplitudes: Tuple[float, ...] = ()
    delta: float = 0.0
    beta: float = 2.0
    nonlinear: bool = True
    chunk: int = 256
    noise_block: int = 256
    n_bootstrap: int = 1000

    def __post_init__(self):
        if not (self.radius > 0.0):
            raise ValueError("radius must be positive")
        eps = tuple(float(e) for e in self.eps_list)
        if len(eps) == 0 or any(e < 0.0 for e in eps):
            raise ValueError("eps_list must hold nonnegative values")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        object.__setattr__(self, "eps_list", eps)
        object.__setattr__(self, "modes",
                           tuple((int(a), int(b)) for a, b in self.modes))
        object.__setattr__(self, "start_modes",
                           tuple((int(a), int(b)) for a, b in self.start_modes))
        amps = tuple(float(a) for a in self.start_amplitudes)
        object.__setattr__(self, "start_amplitudes", amps)
        if len(amps) != len(self.start_modes):
            raise ValueError("start_modes and start_amplitudes disagree")
        start_h2 = sum(a * a for a in amps)
        if start_h2 >= self.radius ** 2:
            raise ValueError("start state must lie strictly inside the ball")
        if not (self.dt > 0.0 and self.t_max > self.dt):
            raise ValueError("need 0 < dt < t_max")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.chunk < 1 or self.noise_block < 1:
            raise ValueError("chunk and noise_block must be positive")

    @property
    def max_steps(self) -> int:
        return int(round(self.t_max / self.dt))


class _QuadraticForm:
    """-B(u, u) on the retained pairs as a real coefficient tensor.

    The packed scalars a are real-linear in the field, so the map is a
    homogeneous quadratic in the 2*nh real coordinates [Re a, Im a];
    polarization against coordinate probes recovers the full symmetric
    tensor from nh (2nh + 3) transform evaluations, done once.
    """

    def __init__(self, fft_quadratic, nh: int):
        n = 2 * nh
        self.nh = nh

        def probe(x):
            a = (x[:nh] + 1j * x[nh:])[None, :]
            b = fft_quadratic(a)[0]
            return np.concatenate([b.real, b.imag])

        T = np.empty((n, n, n))
        singles = [probe(np.eye(n)[p]) for p in range(n)]
        for p in range(n):
            T[:, p, p] = singles[p]
        for p in range(n):
            ep = np.eye(n)[p]
            for q in range(p + 1, n):
                mixed = 0.5 * (probe(ep + np.eye(n)[q]) - singles[p] - singles[q])
                T[:, p, q] = mixed
                T[:, q, p] = mixed
        self.T = T

    def apply(self, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([a.real, a.imag], axis=1)
        y = np.einsum("opq,np,nq->no", self.T, x, x)
        return y[:, :self.nh] + 1j * y[:, self.nh:]


class _TruncatedStepper:
    """Per-chunk state shared by every trajectory of one (eps, row)."""

    def __init__(self, grid: SpectralGrid, cfg: ExitConfig):
        self.grid = grid
        self.cfg = cfg
        self.mask = truncation_mask(grid, cfg.modes)
        ih, im, _ = grid.half_indices(self.mask & grid.active_mask)
        self.ih, self.im = ih, im
        self.nh = ih.size
        lam_flat = grid.lam.reshape(-1)
        self.lam_half = lam_flat[ih]
        self.decay = np.exp(-cfg.dt * self.lam_half)
        q_flat = NoiseOperator(grid, cfg.delta, cfg.beta).q.reshape(-1)
        self.q_half = q_flat[ih]
        self.start = self._pack_start()
        self.quad = None
        if cfg.nonlinear and self.nh <= _TENSOR_PAIR_LIMIT:
            self.quad = _QuadraticForm(self.quadratic_fft, self.nh)

    def _pack_start(self) -> np.ndarray:
        a = np.zeros(self.nh, dtype=np.complex128)
        if not self.cfg.start_modes:
            return a
        flat_pos = {int(p): i for i, p in enumerate(self.ih)}
        flat_neg = {int(p): i for i, p in enumerate(self.im)}
        N = self.grid.N
        for (kx, ky), amp in zip(self.cfg.start_modes, self.cfg.start_amplitudes):
            p = (kx % N) * N + (ky % N)
            if p in flat_pos:
                a[flat_pos[p]] += amp / np.sqrt(2.0)
            elif p in flat_neg:
                a[flat_neg[p]] -= amp / np.sqrt(2.0)
            else:
                raise ValueError(f"start mode {(kx, ky)} is not retained")
        return a

    def sigma(self, eps: float) -> np.ndarray:
        return np.sqrt(eps * self.cfg.dt) * self.q_half

    def quadratic_fft(self, a: np.ndarray) -> np.ndarray:
        """Packed-scalar image of -B(u, u) via the transform core."""
        grid = self.grid
        n = a.shape[0]
        full = np.zeros((n, grid.N * grid.N), dtype=np.complex128)
        full[:, self.ih] = a
        full[:, self.im] = -np.conj(a)
        c = scalars_to_field(grid, full.reshape(n, grid.N, grid.N))
        b = _bilinear_core(grid, c, c, self.mask)
        return -field_to_scalars(grid, b).reshape(n, -1)[:, self.ih]

    def quadratic(self, a: np.ndarray) -> np.ndarray:
        if self.quad is not None:
            return self.quad.apply(a)
        return self.quadratic_fft(a)

    def advance_step(self, a: np.ndarray, xi: np.ndarray,
                     sig: np.ndarray) -> np.ndarray:
        """One semigroup-Heun step plus the noise increment."""
        d, dt = self.decay, self.cfg.dt
        g1 = self.quadratic(a)
        pred = d * (a + dt * g1)
        g2 = self.quadratic(pred)
        return d * a + (0.5 * dt) * (d * g1 + g2) + sig * xi


def _trajectory_generators(master_seed: int, indices: np.ndarray) -> list:
    return [np.random.Generator(np.random.Philox(key=[master_seed, int(g)]))
            for g in indices]


def _refill(gens: list, block: int, nh: int) -> np.ndarray:
    buf = np.empty((len(gens), block, nh), dtype=np.complex128)
    for i, g in enumerate(gens):
        x = g.standard_normal((block, 2, nh))
        buf[i] = (x[:, 0, :] + 1j * x[:, 1, :]) / np.sqrt(2.0)
    return buf


@dataclass
class _ChunkState:
    """Mutable bookkeeping for one batch of trajectories."""

    times: np.ndarray
    status: np.ndarray
    slots: np.ndarray
    a: np.ndarray
    n2: np.ndarray
    gens: list


def _new_chunk_state(st: _TruncatedStepper, cfg: ExitConfig,
                     eps_row: int, start: int, stop: int) -> _ChunkState:
    n = stop - start
    idx = eps_row * cfg.n_samples + np.arange(start, stop, dtype=np.int64)
    a = np.broadcast_to(st.start, (n, st.nh)).copy()
    return _ChunkState(
        times=np.full(n, cfg.max_steps * cfg.dt, dtype=np.float64),
        status=np.full(n, CENSORED, dtype=np.int8),
        slots=np.arange(n),
        a=a,
        n2=np.full(n, 2.0 * float(np.sum(np.abs(st.start) ** 2))),
        gens=_trajectory_generators(cfg.master_seed, idx),
    )


def _compact(cs: _ChunkState, keep: np.ndarray, zbuf: np.ndarray):
    cs.a = cs.a[keep]
    cs.n2 = cs.n2[keep]
    cs.slots = cs.slots[keep]
    cs.gens = [g for g, k in zip(cs.gens, keep) if k]
    return zbuf[keep]


def _run_nonlinear(st: _TruncatedStepper, cs: _ChunkState, cfg: ExitConfig,
                   eps: float) -> None:
    sig = st.sigma(eps)
    r2 = cfg.radius ** 2
    guard2 = (1e6 * max(1.0, cfg.radius)) ** 2
    block = cfg.noise_block
    zbuf = None
    for step in range(cfg.max_steps):
        if cs.slots.size == 0:
            break
        r = step % block
        if r == 0:
            zbuf = _refill(cs.gens, block, st.nh)
        cs.a = st.advance_step(cs.a, zbuf[:, r, :], sig)
        n2_new = 2.0 * np.sum(cs.a.real ** 2 + cs.a.imag ** 2, axis=1)
        blown = ~np.isfinite(n2_new) | (n2_new > guard2)
        crossed = (n2_new >= r2) & ~blown
        if np.any(crossed) or np.any(blown):
            if np.any(crossed):
                theta = (r2 - cs.n2[crossed]) / (n2_new[crossed] - cs.n2[crossed])
                theta = np.clip(theta, 0.0, 1.0)
                cs.times[cs.slots[crossed]] = (step + theta) * cfg.dt
                cs.status[cs.slots[crossed]] = EXITED
            if np.any(blown):
                cs.times[cs.slots[blown]] = (step + 1) * cfg.dt
                cs.status[cs.slots[blown]] = BLOWUP
            keep = ~(crossed | blown)
            cs.n2 = n2_new
            zbuf = _compact(cs, keep, zbuf)
        else:
            cs.n2 = n2_new


def _run_linear_blocks(st: _TruncatedStepper, cs: _ChunkState, cfg: ExitConfig,
                       eps: float) -> None:
    """Diagonal chain evaluated a whole noise block at a time.

    With W_j the running sum of sigma d^{-i} xi_i, the state after step
    j is d^j (d a + W_j); the norm is assembled from |d a + W_j|^2 with
    the factor d^{2j} folded in afterwards, so nothing larger than
    exp(lam dt block) is ever squared.  The stiffness guard keeps that
    factor small enough for full double accuracy.
    """
    sig = st.sigma(eps)
    r2 = cfg.radius ** 2
    block = cfg.noise_block
    lam_dt = st.lam_half * cfg.dt
    if float(np.max(lam_dt)) * block > 30.0:
        raise ValueError("noise_block too long for the stiffest retained mode")
    j = np.arange(block)[:, None]
    coef = sig * np.exp(lam_dt * j)            # sigma d^{-j}, (block, nh)
    dd2 = np.exp(-2.0 * np.outer(np.arange(block), lam_dt))  # d^{2j}

    for base in range(0, cfg.max_steps, block):
        if cs.slots.size == 0:
            break
        zbuf = _refill(cs.gens, block, st.nh)
        used = min(block, cfg.max_steps - base)
        t = zbuf[:, :used, :]
        t *= coef[None, :used, :]
        np.cumsum(t, axis=1, out=t)
        t += (st.decay * cs.a)[:, None, :]
        sq = t.real ** 2 + t.imag ** 2
        n2 = 2.0 * np.einsum("njm,jm->nj", sq, dd2[:used])
        hit = (n2 >= r2).any(axis=1)
        if np.any(hit):
            rows = np.nonzero(hit)[0]
            first = np.argmax(n2[rows] >= r2, axis=1)
            prev = np.where(first == 0, cs.n2[rows],
                            n2[rows, np.maximum(first - 1, 0)])
            cur = n2[rows, first]
            theta = np.clip((r2 - prev) / (cur - prev), 0.0, 1.0)
            cs.times[cs.slots[rows]] = (base + first + theta) * cfg.dt
            cs.status[cs.slots[rows]] = EXITED
        cs.a = np.exp(-lam_dt[None, :] * (used - 1)) * t[:, used - 1, :]
        cs.n2 = n2[:, used - 1]
        if np.any(hit):
            _compact(cs, ~hit, np.empty((hit.size, 0, 0)))


def _simulate_chunk(L: float, N: int, cfg: ExitConfig, eps: float,
                    start: int, stop: int, row: int):
    """Exit times and statuses for global sample indices [start, stop)."""
    grid = make_grid(L, N)
    st = _TruncatedStepper(grid, cfg)
    cs = _new_chunk_state(st, cfg, row, start, stop)
    if cfg.nonlinear:
        _run_nonlinear(st, cs, cfg, eps)
    else:
        _run_linear_blocks(st, cs, cfg, eps)
    return cs.times, cs.status


def simulate_exit_times(grid: SpectralGrid, cfg: ExitConfig, eps: float,
                        row: int, n_workers: int = 1):
    """All exit samples for one eps, chunked and optionally forked."""
    bounds = list(range(0, cfg.n_samples, cfg.chunk)) + [cfg.n_samples]
    args = [(grid.L, grid.N, cfg, eps, lo, hi, row)
            for lo, hi in zip(bounds[:-1], bounds[1:])]
    if n_workers > 1 and hasattr(os, "fork"):
        import multiprocessing as mp

        with mp.get_context("fork").Pool(n_workers) as pool:
            parts = pool.starmap(_simulate_chunk, args)
    else:
        parts = [_simulate_chunk(*a) for a in args]
    times = np.concatenate([p[0] for p in parts])
    status = np.concatenate([p[1] for p in parts])
    return times, status


def exit_time_single(grid: SpectralGrid, cfg: ExitConfig, eps: float,
                     trajectory_index: int, row: int = 0):
    """One trajectory's (time, status), bitwise equal to its batch entry."""
    if not (0 <= trajectory_index < cfg.n_samples):
        raise ValueError("trajectory index out of range")
    t, s = _simulate_chunk(grid.L, grid.N, cfg, eps,
                           trajectory_index, trajectory_index + 1, row)
    return float(t[0]), int(s[0])


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class ExitStats:
    eps: float
    n_exited: int
    n_censored: int
    n_blowup: int
    mean_tau: float
    ci_lo: float
    ci_hi: float
    eps_log_mean: float
    # non-CSV annotation; nonempty when the mean is biased low by censoring
    caveat: str = ""


def exited_mean(times: np.ndarray, status: np.ndarray) -> float:
    """Mean over exited samples only (biased low if any run was censored)."""
    ex = status == EXITED
    if not np.any(ex):
        return math.nan
    return float(np.mean(times[ex]))


def _bootstrap_means(times: np.ndarray, status: np.ndarray,
                     rng: np.random.Generator, n_boot: int) -> np.ndarray:
    usable = status != BLOWUP
    t, s = times[usable], status[usable]
    n = t.size
    out = np.empty(n_boot)
    if n == 0:
        out[:] = math.nan
        return out
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        out[b] = exited_mean(t[idx], s[idx])
    return out


def exit_statistics(times: np.ndarray, status: np.ndarray, eps: float,
                    cfg: ExitConfig, row: int):
    """Row summary plus the bootstrap replicates used for CIs."""
    mean = exited_mean(times, status)
    rng = np.random.Generator(
        np.random.Philox(key=[cfg.master_seed, _ROW_STREAM_OFFSET + row]))
    boots = _bootstrap_means(times, status, rng, cfg.n_bootstrap)
    finite = boots[np.isfinite(boots)]
    if finite.size >= max(10, cfg.n_bootstrap // 10) and np.isfinite(mean):
        ci_lo, ci_hi = np.percentile(finite, [2.5, 97.5])
    else:
        ci_lo = ci_hi = math.nan
    n_cens = int(np.sum(status == CENSORED))
    stats = ExitStats(
        eps=eps,
        n_exited=int(np.sum(status == EXITED)),
        n_censored=n_cens,
        n_blowup=int(np.sum(status == BLOWUP)),
        mean_tau=mean,
        ci_lo=float(ci_lo),
        ci_hi=float(ci_hi),
        eps_log_mean=float(eps * np.log(mean)) if np.isfinite(mean) and mean > 0
        else math.nan,
        caveat=f"mean biased low: {n_cens} censored runs" if n_cens else "",
    )
    return stats, boots


def exit_time_expectation(grid: SpectralGrid, cfg: ExitConfig, eps: float,
                          row: int, n_workers: int = 1) -> ExitStats:
    times, status = simulate_exit_times(grid, cfg, eps, row, n_workers)
    return exit_statistics(times, status, eps, cfg, row)[0]


@dataclass(frozen=True)
class ScanResult:
    rows: Tuple[ExitStats, ...]
    slope: float
    intercept: float
    slope_ci_lo: float
    slope_ci_hi: float
    target: Optional[float]
    rel_dev: Optional[float]


def exit_rate_scan(grid: SpectralGrid, cfg: ExitConfig,
                   target: Optional[float] = None,
                   n_workers: int = 1) -> ScanResult:
    """Sample every eps row, then fit log mean_tau against 1/eps.

    The slope estimates the exit cost; `target` (when given) is the value
    it is compared against, e.g. lam_1 r^2 for a linear mode set or a
    minimized action for a nonlinear one.  Needs at least three rows with
    two or more exits each.
    """
    rows = []
    boot_rows = []
    for row, eps in enumerate(cfg.eps_list):
        times, status = simulate_exit_times(grid, cfg, eps, row, n_workers)
        stats, boots = exit_statistics(times, status, eps, cfg, row)
        rows.append(stats)
        boot_rows.append(boots)

    valid = [i for i, s in enumerate(rows)
             if s.eps > 0 and np.isfinite(s.mean_tau) and s.mean_tau > 0
             and s.n_exited >= 2]
    if len(valid) < 3:
        raise RuntimeError(
            "exit scan produced fewer than three usable eps rows; "
            "widen t_max or raise eps")
    x = np.array([1.0 / rows[i].eps for i in valid])
    y = np.array([np.log(rows[i].mean_tau) for i in valid])
    slope, intercept = np.polyfit(x, y, 1)

    boot_matrix = np.stack([boot_rows[i] for i in valid], axis=1)
    slopes = []
    for b in range(cfg.n_bootstrap):
        m = boot_matrix[b]
        if np.all(np.isfinite(m)) and np.all(m > 0):
            slopes.append(np.polyfit(x, np.log(m), 1)[0])
    if len(slopes) >= max(10, cfg.n_bootstrap // 10):
        lo, hi = np.percentile(slopes, [2.5, 97.5])
    else:
        lo = hi = math.nan

    rel = None if target is None else float((slope - target) / target)
    return ScanResult(rows=tuple(rows), slope=float(slope),
                      intercept=float(intercept), slope_ci_lo=float(lo),
                      slope_ci_hi=float(hi), target=target, rel_dev=rel)


# -- report output ------------------------------------------------------------


def write_exit_csv(rows: Sequence[ExitStats], out_path) -> None:
    write_csv(out_path,
              ["eps", "n_exited", "n_censored", "n_blowup", "mean_tau",
               "ci_lo", "ci_hi", "eps_log_mean"],
              [(r.eps, r.n_exited, r.n_censored, r.n_blowup, r.mean_tau,
                r.ci_lo, r.ci_hi, r.eps_log_mean) for r in rows])


def write_regression_json(res: ScanResult, cfg: ExitConfig, out_path) -> None:
    doc = {
        "slope": res.slope,
        "intercept": res.intercept,
        "slope_ci": [res.slope_ci_lo, res.slope_ci_hi],
        "target": res.target,
        "rel_dev": res.rel_dev,
        "eps_list": list(cfg.eps_list),
        "radius": cfg.radius,
        "n_samples": cfg.n_samples,
        "n_rows_fit": sum(1 for r in res.rows
                          if r.eps > 0 and np.isfinite(r.mean_tau)
                          and r.n_exited >= 2),
        "caveats": [r.caveat for r in res.rows if r.caveat],
    }
    tmp = str(out_path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_path)
