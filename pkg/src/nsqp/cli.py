"""Command line driver for the experiment reports.

Each subcommand reads one TOML config, runs the experiment, and writes
its delimited results, a rendered PNG, and an echo of the fully resolved
configuration into the output directory.  Exit codes: 0 success,
1 operator check failure, 2 invalid configuration, 3 blow-up,
4 optimizer did not converge.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .action import residual_profile
from .config import ConfigError, dump_config, load_config
from .dynamics import BlowUpError
from .exits import ExitConfig, exit_rate_scan, truncation_mask, \
    write_exit_csv, write_regression_json
from .figures import save_checks_figure, save_exit_figure, \
    save_minimization_figure, save_sweep_figure
from .io_utils import write_csv
from .quasipotential import gamma_sweep, minimize_action, write_sweep_csv
from .spectral import FourierField, bilinear_B, dense_advect_reference, \
    field_from_mode_pairs, hermitian_part, inner_h, leray_project, \
    make_grid, random_field, stokes_apply


def _write_json(doc, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _resolve_threads(flag, cfg) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("NSQP_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"NSQP_THREADS must be an integer, got {env!r}")
    table = cfg.get("exit", {})
    return max(1, table.get("threads", 1))


def _mode_mask(grid, pairs):
    return truncation_mask(grid, pairs) if pairs else None


# -- verify-operators ---------------------------------------------------------


def _operator_check_rows(grid, rng, n_fields, tol):
    """(name, max_abs_err, tol, passed) per identity; errors are relative."""
    div_e = par_e = anti_e = ener_e = orth_e = alias_v = 0.0
    for _ in range(n_fields):
        u = random_field(grid, rng)
        v = random_field(grid, rng)
        w = random_field(grid, rng)
        k_dot = (grid.kx * u.coeffs[0] + grid.ky * u.coeffs[1])
        div_e = max(div_e, float(np.abs(k_dot).max()))
        phys = u.to_physical()
        quad = float(np.sum(phys ** 2) / grid.N ** 2)
        par_e = max(par_e, abs(quad - u.norm_h() ** 2) / u.norm_h() ** 2)
        scale = u.norm_h() * v.norm_h() * w.norm_h()
        anti_e = max(anti_e, abs(inner_h(bilinear_B(u, v), w)
                                 + inner_h(bilinear_B(u, w), v)) / scale)
        ener_e = max(ener_e, abs(inner_h(bilinear_B(u, u), u)) / u.norm_h() ** 3)
        orth_e = max(orth_e, abs(inner_h(stokes_apply(u), bilinear_B(u, u)))
                     / u.norm_v() ** 3)
        # band-limited fields cannot alias, so the leak demo needs content
        # beyond the 2/3 cut
        raw = (rng.standard_normal((2, grid.N, grid.N))
               + 1j * rng.standard_normal((2, grid.N, grid.N)))
        full = leray_project(FourierField._wrap(
            grid, hermitian_part(raw * grid.state_mask)))
        fn = full.norm_h()
        alias_v = max(alias_v,
                      abs(inner_h(bilinear_B(full, full, dealias=False), full))
                      / fn ** 3)

    dense_grid = make_grid(grid.L, 8)
    dense_e = 0.0
    for _ in range(n_fields):
        u = random_field(dense_grid, rng)
        v = random_field(dense_grid, rng)
        fast = bilinear_B(u, v)
        ref = dense_advect_reference(dense_grid, u, v)
        dense_e = max(dense_e, (fast - ref).norm_h() / max(ref.norm_h(), 1e-30))

    rows = [
        ("divergence_free", div_e, tol, div_e <= tol),
        ("parseval_quadrature", par_e, tol, par_e <= tol),
        ("advection_antisymmetry", anti_e, tol, anti_e <= tol),
        ("energy_conservation", ener_e, tol, ener_e <= tol),
        ("stokes_orthogonality", orth_e, tol, orth_e <= tol),
        ("dense_convolution_match", dense_e, tol, dense_e <= tol),
        # aliased product must leak energy; the check fails if it does not
        ("dealias_off_energy_leak", alias_v, tol, alias_v > 100.0 * tol),
    ]
    return rows


def cmd_verify_operators(cfg, out_dir, threads) -> int:
    grid = make_grid(cfg["grid"]["L"], cfg["grid"]["N"])
    rng = np.random.default_rng(cfg["check"]["seed"])
    rows = _operator_check_rows(grid, rng, cfg["check"]["n_fields"],
                                cfg["check"]["tol"])
    write_csv(os.path.join(out_dir, "operator_checks.csv"),
              ["check", "max_rel_err", "tol", "passed"], rows)
    save_checks_figure(rows, os.path.join(out_dir, "operator_checks.png"))
    ok = all(r[3] for r in rows)
    for name, err, tol, passed in rows:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {err:.3e}")
    return 0 if ok else 1


# -- quasipotential -----------------------------------------------------------


def _target_field(grid, table):
    return field_from_mode_pairs(grid, table["modes"], table["amplitudes"])


def _minimize_from_tables(grid, phi, m):
    mask = _mode_mask(grid, m["modes"])
    return minimize_action(
        phi, m["dt"], m["delta"], beta=m["beta"], nonlinear=m["nonlinear"],
        mode_mask=mask, tail_frac=m["tail_frac"], max_iter=m["max_iter"],
        rel_grad_tol=m["rel_grad_tol"]), mask


def _report_doc(rep) -> dict:
    return {
        "value": rep.value,
        "formula_value": rep.formula_value,
        "rel_gap": rep.rel_gap,
        "initial_value": rep.initial_value,
        "iterations": rep.iterations,
        "grad_norm": rep.grad_norm,
        "converged": rep.converged,
        "tail_v_norm": rep.tail_v_norm,
        "phi_reg_norm": rep.phi_reg_norm,
        "t_span": rep.T,
        "dt": rep.dt,
        "delta": rep.delta,
        "beta": rep.beta,
    }


def cmd_quasipotential(cfg, out_dir, threads) -> int:
    grid = make_grid(cfg["grid"]["L"], cfg["grid"]["N"])
    phi = _target_field(grid, cfg["target"])
    m = cfg["minimize"]
    rep, mask = _minimize_from_tables(grid, phi, m)
    profile = residual_profile(rep.path, m["delta"], beta=m["beta"],
                               nonlinear=m["nonlinear"], mode_mask=mask)
    t = rep.path.times
    _write_json(_report_doc(rep), os.path.join(out_dir, "minimize_report.json"))
    write_csv(os.path.join(out_dir, "path_norms.csv"),
              ["t", "h_norm", "v_norm", "residual_density"],
              list(zip(t, rep.path.norms_h(), rep.path.norms_v(), profile)))
    save_minimization_figure(rep.path, profile,
                             os.path.join(out_dir, "quasipotential.png"))
    print(f"value {rep.value:.8f}  |phi|_V^2 {rep.formula_value:.8f}  "
          f"rel_gap {rep.rel_gap:.3e}  iterations {rep.iterations}")
    return 0 if rep.converged else 4


def cmd_gamma_sweep(cfg, out_dir, threads) -> int:
    grid = make_grid(cfg["grid"]["L"], cfg["grid"]["N"])
    phi = _target_field(grid, cfg["target"])
    s = cfg["sweep"]
    mask = _mode_mask(grid, s["modes"])
    reps = gamma_sweep(
        phi, s["deltas"], s["dt"], beta=s["beta"], nonlinear=s["nonlinear"],
        mode_mask=mask, tail_frac=s["tail_frac"], max_iter=s["max_iter"],
        rel_grad_tol=s["rel_grad_tol"])
    write_sweep_csv(reps, os.path.join(out_dir, "sweep.csv"))
    values = [r.value for r in reps]
    _write_json({
        "deltas": list(s["deltas"]),
        "values": values,
        "formula_value": reps[-1].formula_value,
        "final_rel_gap": reps[-1].rel_gap,
        "nonincreasing": all(b <= a * (1 + 1e-12)
                             for a, b in zip(values, values[1:])),
    }, os.path.join(out_dir, "sweep_summary.json"))
    save_sweep_figure(reps, os.path.join(out_dir, "gamma_sweep.png"))
    for r in reps:
        print(f"delta {r.delta:<10g} value {r.value:.8f} rel_gap {r.rel_gap:.3e}")
    return 0 if all(r.converged for r in reps) else 4


# -- exit-scan ----------------------------------------------------------------


def _resolve_exit_target(grid, e, exit_cfg):
    tag = e["target"]
    if tag == "lam1_r2":
        mask = truncation_mask(grid, exit_cfg.modes)
        lam_min = float(grid.lam[mask].min())
        return lam_min * exit_cfg.radius ** 2
    if tag == "minimize":
        mask = truncation_mask(grid, exit_cfg.modes)
        lam_flat = np.where(mask, grid.lam, np.inf)
        i, j = np.unravel_index(int(np.argmin(lam_flat)), lam_flat.shape)
        kx = i if i <= grid.N // 2 else i - grid.N
        ky = j if j <= grid.N // 2 else j - grid.N
        phi = field_from_mode_pairs(grid, [(kx, ky)], [exit_cfg.radius])
        rep = minimize_action(phi, e["dt"], e["delta"], beta=e["beta"],
                              nonlinear=e["nonlinear"], mode_mask=mask)
        return rep.value
    try:
        return float(tag)
    except ValueError:
        raise ConfigError(
            f"exit.target must be 'lam1_r2', 'minimize' or a number, got {tag!r}")


def cmd_exit_scan(cfg, out_dir, threads) -> int:
    grid = make_grid(cfg["grid"]["L"], cfg["grid"]["N"])
    e = cfg["exit"]
    exit_cfg = ExitConfig(
        radius=e["radius"], eps_list=tuple(e["eps"]), dt=e["dt"],
        t_max=e["t_max"], n_samples=e["n_samples"],
        master_seed=e["master_seed"], modes=tuple(map(tuple, e["modes"])),
        start_modes=tuple(map(tuple, e["start_modes"])),
        start_amplitudes=tuple(e["start_amplitudes"]), delta=e["delta"],
        beta=e["beta"], nonlinear=e["nonlinear"], chunk=e["chunk"],
        noise_block=e["noise_block"], n_bootstrap=e["n_bootstrap"])
    target = _resolve_exit_target(grid, e, exit_cfg)
    res = exit_rate_scan(grid, exit_cfg, target=target, n_workers=threads)
    write_exit_csv(res.rows, os.path.join(out_dir, "exit_times.csv"))
    write_regression_json(res, exit_cfg,
                          os.path.join(out_dir, "regression.json"))
    save_exit_figure(res, os.path.join(out_dir, "exit_scan.png"))
    print(f"slope {res.slope:.6f}  target {target:.6f}  "
          f"rel_dev {res.rel_dev:+.4f}")
    return 0


DISPATCH = {
    "verify-operators": cmd_verify_operators,
    "quasipotential": cmd_quasipotential,
    "gamma-sweep": cmd_gamma_sweep,
    "exit-scan": cmd_exit_scan,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nsqp",
        description="action-functional and exit-time experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in DISPATCH:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out-dir", required=True, help="report directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes for sampling "
                            "(overrides NSQP_THREADS and the config)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.command)
        threads = _resolve_threads(args.threads, cfg)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(args.out_dir, "resolved_config.toml"))

    try:
        return DISPATCH[args.command](cfg, args.out_dir, threads)
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
