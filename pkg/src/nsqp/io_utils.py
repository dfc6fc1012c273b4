"""Deterministic text output helpers shared by the report writers.

Floats are rendered with %.17g so a rerun with identical inputs produces
byte-identical files.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def fmt_cell(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    if isinstance(x, str):
        return x
    return fmt_float(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt_cell(x) for x in row))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
