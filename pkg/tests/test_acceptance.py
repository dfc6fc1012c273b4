"""End-to-end checks of the package's advertised guarantees.

Each test exercises one headline claim at its published tolerance and
prints one [PASS]/[FAIL] line with the measured numbers (shown with -s,
or in captured output when a test fails).  Budgets are asserted too, so
a pathological slowdown fails loudly instead of silently dragging.

The Monte Carlo ladders in check 08 dominate the wall time (about an
hour); everything else finishes in seconds to a few minutes.
"""

import sys
import time

import numpy as np

from nsqp.action import (
    action_and_field_grad,
    action_decomposition,
    action_value,
)
from nsqp.cli import main as cli_main
from nsqp.dynamics import IntegratorConfig, PathGrid, solve_deterministic
from nsqp.exits import (
    EXITED,
    ExitConfig,
    exit_rate_scan,
    simulate_exit_times,
    truncation_mask,
)
from nsqp.quasipotential import (
    gamma_sweep,
    minimize_action,
    quasipotential_formula,
    reverse_flow_candidate,
)
from nsqp.spectral import (
    FourierField,
    NoiseOperator,
    bilinear_B,
    dense_advect_reference,
    field_from_mode_pairs,
    hermitian_part,
    inner_h,
    leray_project,
    make_grid,
    random_field,
    stokes_apply,
    trilinear_b,
)

TWO_PI = 2.0 * np.pi


def _report(label, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    sys.stdout.flush()


# -- 01: operator identities -------------------------------------------------

def test_01_operator_identities():
    """Antisymmetry, energy neutrality, A-B orthogonality, Leray projection.

    100 random dealiased fields spread over N = 8..32; every residual is
    measured relative to the natural norm product and must stay below 1e-10.
    """
    t0 = time.perf_counter()
    sizes = (8, 12, 16, 24, 32)
    worst = 0.0
    tiny = 1e-300
    for N in sizes:
        grid = make_grid(TWO_PI, N)
        rng = np.random.default_rng(1000 + N)
        for _ in range(20):
            u = random_field(grid, rng, amplitude=1.0)
            v = random_field(grid, rng, amplitude=0.7)
            w = random_field(grid, rng, amplitude=1.3)

            anti = abs(trilinear_b(u, v, w) + trilinear_b(u, w, v))
            anti /= u.norm_h() * v.norm_v() * w.norm_h() + tiny

            energy = abs(trilinear_b(u, u, u))
            energy /= u.norm_h() ** 2 * u.norm_v() + tiny

            bu = bilinear_B(u, u)
            au = stokes_apply(u)
            orth = abs(inner_h(au, bu)) / (au.norm_h() * bu.norm_h() + tiny)

            # a raw (non-solenoidal) field exercises the projection
            raw = rng.standard_normal((2, N, N)) + 1j * rng.standard_normal((2, N, N))
            raw = hermitian_part(raw) * grid.dealias_mask * grid.nonzero_mask
            p1 = leray_project(FourierField._wrap(grid, raw))
            p2 = leray_project(p1)
            idem = (p2 - p1).norm_h() / (p1.norm_h() + tiny)
            kdot = np.abs(grid.kx * p1.coeffs[0] + grid.ky * p1.coeffs[1])
            kmag = np.sqrt(grid.k2) + (grid.k2 == 0)
            div = float(np.max(kdot / kmag)) / (p1.norm_h() + tiny)

            worst = max(worst, anti, energy, orth, idem, div)
    el = time.perf_counter() - t0
    ok = worst <= 1e-10 and el < 10.0
    _report("01 operator identities", ok,
            f"worst rel residual {worst:.2e} (tol 1e-10), {el:.1f}s of 10s")
    assert worst <= 1e-10
    assert el < 10.0


# -- 02: collocation product vs dense convolution ------------------------------

def test_02_dense_convolution_oracle():
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 8)
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(5):
        u = random_field(grid, rng, amplitude=1.1)
        v = random_field(grid, rng, amplitude=0.9)
        fast = bilinear_B(u, v)
        dense = dense_advect_reference(grid, u, v)
        worst = max(worst, (fast - dense).norm_h() / dense.norm_h())
    el = time.perf_counter() - t0
    ok = worst <= 1e-10 and el < 30.0
    _report("02 dense convolution oracle", ok,
            f"worst rel mismatch {worst:.2e} (tol 1e-10), {el:.1f}s of 30s")
    assert worst <= 1e-10
    assert el < 30.0


# -- 03: unforced energy decay -------------------------------------------------

def test_03_energy_decay_balance():
    """With f = 0 the H-norm must fall at every step, the V-norm must obey
    |u(t)|_V^2 <= e^{-lam_1 t} |u0|_V^2 within 5%, and the dissipation
    integral 2 nu int |u|_V^2 dt must balance the H-drop within 5%."""
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 16)
    rng = np.random.default_rng(3)
    u0 = random_field(grid, rng, amplitude=1.0)
    cfg = IntegratorConfig(dt=1e-3, nu=1.0, nonlinear=True)
    path = solve_deterministic(u0, 0.0, 5.0, cfg)

    h2 = path.norms_h() ** 2
    drops = np.diff(h2)
    monotone = bool(np.all(drops <= 0.0))

    # periodic A-B orthogonality gives d/dt |u|_V^2 = -2|Au|_H^2, so the
    # decay bound holds with constant one; 5% slack covers quadrature
    v2 = path.norms_v() ** 2
    bound_ratio = float(np.max(v2 * np.exp(grid.lam_1 * path.times) / v2[0]))

    dissipated = 2.0 * cfg.nu * path.dt * (np.sum(v2) - 0.5 * (v2[0] + v2[-1]))
    balance = abs(dissipated - (h2[0] - h2[-1])) / h2[0]
    el = time.perf_counter() - t0
    ok = monotone and bound_ratio <= 1.05 and balance <= 0.05 and el < 60.0
    _report("03 energy decay balance", ok,
            f"monotone={monotone}, V-bound ratio {bound_ratio:.4f} (tol 1.05), "
            f"balance defect {balance:.2e} (tol 5e-2), {el:.1f}s of 60s")
    assert monotone, f"H-norm rose at {int(np.argmax(drops > 0))}"
    assert bound_ratio <= 1.05
    assert balance <= 0.05
    assert el < 60.0


# -- 04: quasipotential against the closed form --------------------------------

def _candidate_gaps(phi, dt):
    """Candidate action gap vs the closed form, twice.

    The first number compares against |phi|_V^2 directly. The second
    subtracts the tail stub first: the path starts at the tail state, so
    its exact continuum action is |phi|_V^2 - |u(-T)|_V^2, and only the
    remainder is discretization error. Refinement ratios must be taken on
    the second number, otherwise the dt-independent stub (about 1e-6
    relative under the 1e-3 tail rule) floors the lowest-mode target,
    where quadrature error alone is already down at that scale.
    """
    path = reverse_flow_candidate(phi, dt, tail_frac=1e-3)
    s = action_value(path, delta=0.0)
    f = quasipotential_formula(phi)
    stub = path.node(0).norm_v() ** 2
    return abs(s - f) / f, abs(s - (f - stub)) / f


def test_04_quasipotential_identity():
    """Reverse-flow candidate and minimized action both land within 2% of
    |phi|_V^2 at dt = 2e-3, and the candidate's gap is O(dt^2): halving dt
    shrinks it by at least 3x."""
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 16)
    rng = np.random.default_rng(20260815)
    targets = [
        ("lowest mode", field_from_mode_pairs(grid, [(1, 0)], [0.35])),
        ("generic", random_field(grid, rng, amplitude=0.3, kmax=3)),
    ]
    lines = []
    ok = True
    for name, phi in targets:
        gap_c, refine_c = _candidate_gaps(phi, 2e-3)
        _, refine_h = _candidate_gaps(phi, 1e-3)
        ratio = refine_c / max(refine_h, 1e-300)
        rep = minimize_action(phi, dt=2e-3, delta=0.0, max_iter=250,
                              rel_grad_tol=1e-6)
        gap_m = abs(rep.rel_gap)
        ok = ok and gap_c <= 0.02 and gap_m <= 0.02 and ratio >= 3.0
        lines.append(f"{name}: cand {gap_c:.2e}, min {gap_m:.2e}, "
                     f"dt-halving x{ratio:.1f}")
    el = time.perf_counter() - t0
    ok = ok and el < 600.0
    _report("04 quasipotential identity", ok,
            "; ".join(lines) + f", {el:.0f}s of 600s")
    assert ok, lines
    assert el < 600.0


# -- 05: action decomposition defect -------------------------------------------

def _smooth_path(grid, rng, dt, horizon):
    c0 = random_field(grid, rng, amplitude=0.25).coeffs
    c1 = random_field(grid, rng, amplitude=0.20).coeffs
    c2 = random_field(grid, rng, amplitude=0.15).coeffs
    n = int(round(horizon / dt))
    s = (np.arange(n + 1) * dt / horizon)[:, None, None, None]
    coeffs = np.cos(np.pi * s) * c0 + np.sin(np.pi * s) * c1 + s * (1 - s) * c2
    return PathGrid(grid, 0.0, horizon, coeffs)


def test_05_decomposition_defect():
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 8)
    worst = 0.0
    worst_ratio = np.inf
    for seed in (5, 6, 7):
        rng = np.random.default_rng(seed)
        state = rng.bit_generator.state
        fine = action_decomposition(_smooth_path(grid, rng, 1e-3, 1.0))
        rng.bit_generator.state = state          # same path, coarser nodes
        coarse = action_decomposition(_smooth_path(grid, rng, 2e-3, 1.0))
        rel = abs(fine.defect) / fine.total
        worst = max(worst, rel)
        worst_ratio = min(worst_ratio,
                          abs(coarse.defect) / max(abs(fine.defect), 1e-300))
    el = time.perf_counter() - t0
    ok = worst <= 1e-6 and worst_ratio >= 3.0 and el < 60.0
    _report("05 decomposition defect", ok,
            f"worst rel defect {worst:.2e} (tol 1e-6), "
            f"dt-halving x{worst_ratio:.2f}, {el:.1f}s of 60s")
    assert worst <= 1e-6
    assert worst_ratio >= 3.0
    assert el < 60.0


# -- 06: analytic gradient vs central differences -------------------------------

def test_06_gradient_check():
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 8)
    rng = np.random.default_rng(66)
    coeffs = _smooth_path(grid, rng, 0.02, 0.5).coeffs
    qinv2 = NoiseOperator(grid, 0.3).q_inv ** 2
    mask = grid.dealias_mask
    _, grad = action_and_field_grad(grid, coeffs, 0.02, qinv2, True, mask)

    worst = 0.0
    h = 1e-5
    for _ in range(20):
        dc = np.stack([random_field(grid, rng, amplitude=1.0).coeffs
                       for _ in range(coeffs.shape[0])])
        dc /= np.linalg.norm(dc)
        pred = np.vdot(dc, grad).real
        vp, _ = action_and_field_grad(grid, coeffs + h * dc, 0.02, qinv2, True, mask)
        vm, _ = action_and_field_grad(grid, coeffs - h * dc, 0.02, qinv2, True, mask)
        fd = (vp - vm) / (2.0 * h)
        worst = max(worst, abs(pred - fd) / max(abs(fd), 1.0))
    el = time.perf_counter() - t0
    ok = worst <= 1e-5 and el < 120.0
    _report("06 gradient check", ok,
            f"worst rel error {worst:.2e} over 20 directions (tol 1e-5), "
            f"{el:.1f}s of 120s")
    assert worst <= 1e-5
    assert el < 120.0


# -- 07: shaped cost converges as the mollifier is removed ----------------------

def test_07_noise_shaping_sweep():
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 16)
    phi = field_from_mode_pairs(grid, [(1, 0), (1, 1)], [0.3, 0.2])
    deltas = (1.0, 0.1, 0.01, 1e-3, 1e-4)
    reports = gamma_sweep(phi, deltas, dt=0.01, max_iter=2000,
                          rel_grad_tol=1e-6)
    values = np.array([r.value for r in reports])
    nonincreasing = bool(np.all(np.diff(values) <= 1e-10 * values[0]))
    final_gap = abs(reports[-1].rel_gap)
    el = time.perf_counter() - t0
    ok = nonincreasing and final_gap <= 0.01 and el < 1800.0
    _report("07 noise shaping sweep", ok,
            f"values {np.array2string(values, precision=6)}, "
            f"final rel gap {final_gap:.2e} (tol 1e-2), {el:.0f}s of 1800s")
    assert nonincreasing, values
    assert final_gap <= 0.01
    assert el < 1800.0


# -- 08: exit-time slopes ----------------------------------------------------

# Both ladders sit in the window where exits are rare enough for the slope
# to mean something but common enough to sample in under an hour.  The
# linear one is checked against lam_1 r^2 directly; the nonlinear one
# against this package's own minimized action on the same mode set.
LINEAR_EXIT = ExitConfig(
    radius=0.4,
    eps_list=tuple(0.16 / w for w in (13.5, 14.5, 15.5, 16.5)),
    dt=0.04,
    t_max=6.0e6,
    n_samples=2000,
    master_seed=20260815,
    modes=((1, 0),),
    nonlinear=False,
    chunk=2000,
    noise_block=512,
    n_bootstrap=1000,
)

NONLINEAR_EXIT = ExitConfig(
    radius=0.4,
    eps_list=tuple(0.16 / w for w in (9.0, 10.0, 11.0, 12.0)),
    dt=0.01,
    t_max=3.0e5,
    n_samples=1000,
    master_seed=20260815,
    modes=((1, 0), (1, 1), (2, 1)),
    delta=1e-3,
    beta=2.0,
    nonlinear=True,
    chunk=1000,
    noise_block=2048,
    n_bootstrap=1000,
)


def _censor_frac(rows):
    return max(r.n_censored / (r.n_exited + r.n_censored + r.n_blowup)
               for r in rows)


def test_08_exit_time_slopes():
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 8)

    lam1 = float(np.min(grid.lam[grid.nonzero_mask]))
    lin_target = lam1 * LINEAR_EXIT.radius ** 2
    lin = exit_rate_scan(grid, LINEAR_EXIT, target=lin_target)
    lin_dev = abs(lin.rel_dev)
    lin_cens = _censor_frac(lin.rows)

    phi = field_from_mode_pairs(grid, [(1, 0)], [NONLINEAR_EXIT.radius])
    mask = truncation_mask(grid, NONLINEAR_EXIT.modes)
    rep = minimize_action(phi, dt=NONLINEAR_EXIT.dt, delta=NONLINEAR_EXIT.delta,
                          beta=NONLINEAR_EXIT.beta, mode_mask=mask,
                          max_iter=2000, rel_grad_tol=1e-7)
    nl = exit_rate_scan(grid, NONLINEAR_EXIT, target=rep.value)
    nl_dev = abs(nl.rel_dev)
    nl_cens = _censor_frac(nl.rows)

    el = time.perf_counter() - t0
    ok = (lin_dev <= 0.10 and nl_dev <= 0.15
          and lin_cens < 0.05 and nl_cens < 0.05 and el < 7200.0)
    _report("08 exit-time slopes", ok,
            f"linear slope {lin.slope:.5f} vs {lin_target:.5f} "
            f"(dev {100 * lin.rel_dev:+.1f}%, tol 10%); "
            f"nonlinear slope {nl.slope:.5f} vs {rep.value:.5f} "
            f"(dev {100 * nl.rel_dev:+.1f}%, tol 15%); "
            f"censoring {100 * lin_cens:.2f}%/{100 * nl_cens:.2f}%, "
            f"{el:.0f}s of 7200s")
    assert len(lin.rows) >= 4 and len(nl.rows) >= 4
    assert all(r.n_exited + r.n_censored + r.n_blowup >= 500 for r in lin.rows)
    assert all(r.n_exited + r.n_censored + r.n_blowup >= 500 for r in nl.rows)
    assert lin_cens < 0.05 and nl_cens < 0.05
    assert lin_dev <= 0.10, f"linear slope off by {100 * lin.rel_dev:+.1f}%"
    assert nl_dev <= 0.15, f"nonlinear slope off by {100 * nl.rel_dev:+.1f}%"
    assert el < 7200.0


# -- 09: bitwise reproducibility ------------------------------------------------

REPRO_TOML = """\
experiment = "exit-scan"

[grid]
N = 8

[exit]
radius = 0.4
eps = [0.08, 0.064, 0.0533]
dt = 0.01
t_max = 800.0
n_samples = 100
master_seed = 11
nonlinear = false
chunk = 32
noise_block = 256
n_bootstrap = 100
"""


def _tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_09_reproducibility(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    grid = make_grid(TWO_PI, 8)
    cfg = ExitConfig(radius=0.4, eps_list=(0.08, 0.06), dt=0.01, t_max=500.0,
                     n_samples=64, master_seed=11, modes=((1, 0),),
                     nonlinear=False, chunk=16, noise_block=256, n_bootstrap=50)
    runs = [simulate_exit_times(grid, cfg, 0.08, row=0, n_workers=k)
            for k in (1, 3, 1)]
    same_workers = (np.array_equal(runs[0][0], runs[1][0])
                    and np.array_equal(runs[0][1], runs[1][1]))
    same_rerun = (runs[0][0].tobytes() == runs[2][0].tobytes()
                  and np.array_equal(runs[0][1], runs[2][1]))
    n_ex = int(np.sum(runs[0][1] == EXITED))

    # the full artifact tree must survive a rerun under a different
    # worker count byte for byte (CSV, JSON, PNG, resolved config)
    cfg_path = tmp_path / "scan.toml"
    cfg_path.write_text(REPRO_TOML)
    trees = []
    for threads, sub in (("1", "a"), ("2", "b")):
        monkeypatch.setenv("NSQP_THREADS", threads)
        out = tmp_path / sub
        rc = cli_main(["exit-scan", "--config", str(cfg_path),
                       "--out-dir", str(out)])
        assert rc == 0
        trees.append(_tree_bytes(out))
    monkeypatch.delenv("NSQP_THREADS")
    same_tree = trees[0] == trees[1]

    el = time.perf_counter() - t0
    ok = same_workers and same_rerun and same_tree and n_ex > 0
    _report("09 reproducibility", ok,
            f"rerun bitwise={same_rerun}, worker-count invariant={same_workers}, "
            f"artifact trees identical={same_tree} "
            f"({len(trees[0])} files), {n_ex}/64 exits, {el:.1f}s")
    assert same_rerun
    assert same_workers
    assert same_tree
    assert n_ex > 0
