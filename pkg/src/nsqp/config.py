"""Experiment configuration: strict TOML loading and echoing.

Every table is validated against a fixed schema; unknown keys anywhere
are an error rather than a silent ignore, so a typo cannot quietly fall
back to a default.  The fully resolved configuration (defaults applied)
can be written back out next to the experiment's results.
"""

from __future__ import annotations

import math
from typing import Any, Dict, Optional, Tuple

import tomli


class ConfigError(ValueError):
    pass


class Field:
    """One leaf entry: expected kind, and a default unless required."""

    REQUIRED = object()

    def __init__(self, kind: str, default: Any = REQUIRED):
        self.kind = kind
        self.default = default


def _coerce(value: Any, kind: str, where: str) -> Any:
    if kind == "bool":
        if isinstance(value, bool):
            return value
    elif kind == "int":
        if isinstance(value, bool):
            pass
        elif isinstance(value, int):
            return value
    elif kind == "number":
        if isinstance(value, bool):
            pass
        elif isinstance(value, (int, float)):
            v = float(value)
            if not math.isfinite(v):
                raise ConfigError(f"{where}: must be finite")
            return v
    elif kind == "str":
        if isinstance(value, str):
            return value
    elif kind == "numberlist":
        if isinstance(value, list) and all(
                isinstance(x, (int, float)) and not isinstance(x, bool)
                for x in value):
            return [float(x) for x in value]
    elif kind == "intpairs":
        ok = isinstance(value, list) and all(
            isinstance(p, list) and len(p) == 2
            and all(isinstance(c, int) and not isinstance(c, bool) for c in p)
            for p in value)
        if ok:
            return [(p[0], p[1]) for p in value]
    else:
        raise AssertionError(f"unknown schema kind {kind}")
    raise ConfigError(f"{where}: expected {kind}, got {value!r}")


def _check_table(data: Dict[str, Any], schema: Dict[str, Any],
                 where: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'top level'}: expected a table")
    unknown = sorted(set(data) - set(schema))
    if unknown:
        raise ConfigError(
            f"unknown key(s) {unknown} in {where or 'top level'}")
    out: Dict[str, Any] = {}
    for key, spec in schema.items():
        path = f"{where}.{key}" if where else key
        if isinstance(spec, dict):
            out[key] = _check_table(data.get(key, {}), spec, path)
        else:
            if key in data:
                out[key] = _coerce(data[key], spec.kind, path)
            elif spec.default is Field.REQUIRED:
                raise ConfigError(f"missing required key {path}")
            else:
                out[key] = spec.default
    return out


_GRID = {"L": Field("number", 2 * math.pi), "N": Field("int", 16)}

SCHEMAS: Dict[str, Dict[str, Any]] = {
    "verify-operators": {
        "experiment": Field("str"),
        "grid": _GRID,
        "check": {
            "seed": Field("int", 0),
            "n_fields": Field("int", 3),
            "tol": Field("number", 1e-10),
        },
    },
    "quasipotential": {
        "experiment": Field("str"),
        "grid": _GRID,
        "target": {
            "modes": Field("intpairs"),
            "amplitudes": Field("numberlist"),
        },
        "minimize": {
            "dt": Field("number", 0.01),
            "delta": Field("number", 0.0),
            "beta": Field("number", 2.0),
            "nonlinear": Field("bool", True),
            "tail_frac": Field("number", 1e-3),
            "max_iter": Field("int", 5000),
            "rel_grad_tol": Field("number", 1e-8),
            "modes": Field("intpairs", []),
        },
    },
    "gamma-sweep": {
        "experiment": Field("str"),
        "grid": _GRID,
        "target": {
            "modes": Field("intpairs"),
            "amplitudes": Field("numberlist"),
        },
        "sweep": {
            "deltas": Field("numberlist"),
            "dt": Field("number", 0.01),
            "beta": Field("number", 2.0),
            "nonlinear": Field("bool", True),
            "tail_frac": Field("number", 1e-3),
            "max_iter": Field("int", 5000),
            "rel_grad_tol": Field("number", 1e-8),
            "modes": Field("intpairs", []),
        },
    },
    "exit-scan": {
        "experiment": Field("str"),
        "grid": _GRID,
        "exit": {
            "radius": Field("number"),
            "eps": Field("numberlist"),
            "dt": Field("number"),
            "t_max": Field("number"),
            "n_samples": Field("int"),
            "master_seed": Field("int"),
            "modes": Field("intpairs", [(1, 0)]),
            "start_modes": Field("intpairs", []),
            "start_amplitudes": Field("numberlist", []),
            "delta": Field("number", 0.0),
            "beta": Field("number", 2.0),
            "nonlinear": Field("bool", True),
            "chunk": Field("int", 256),
            "noise_block": Field("int", 256),
            "n_bootstrap": Field("int", 1000),
            "target": Field("str", "lam1_r2"),
            "threads": Field("int", 1),
        },
    },
}


def load_config(path, expected_experiment: Optional[str] = None
                ) -> Dict[str, Any]:
    """Parse, validate and resolve one experiment configuration."""
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    tag = raw.get("experiment")
    if not isinstance(tag, str) or tag not in SCHEMAS:
        raise ConfigError(
            f"experiment must be one of {sorted(SCHEMAS)}, got {tag!r}")
    if expected_experiment is not None and tag != expected_experiment:
        raise ConfigError(
            f"config is for experiment {tag!r}, not {expected_experiment!r}")
    return _check_table(raw, SCHEMAS[tag], "")


def _toml_scalar(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise AssertionError(f"cannot serialize {v!r}")


def dump_config(cfg: Dict[str, Any], path) -> None:
    """Write a resolved configuration back out as TOML."""
    lines = []
    for key, val in cfg.items():
        if not isinstance(val, dict):
            lines.append(f"{key} = {_toml_scalar(val)}")
    for key, val in cfg.items():
        if isinstance(val, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k2, v2 in val.items():
                lines.append(f"{k2} = {_toml_scalar(v2)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
