"""Versioned flat-text tables used for oracle solutions and checkpoints.

Layout::

    #sobolev-td <kind> v1
    key = value
    ...
    ---
    col_a,col_b,...
    1.0,2.0,...

Floats are written with 17 significant digits so a round trip is exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_table(path, kind: str, meta: dict[str, object], columns: list[str], rows: np.ndarray) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    lines = [f"#sobolev-td {kind} v{FORMAT_VERSION}"]
    for k, v in meta.items():
        lines.append(f"{k} = {fmt(v) if isinstance(v, float) else v}")
    lines.append("---")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path, kind: str) -> tuple[dict[str, str], list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "#sobolev-td" or head[1] != kind:
        raise FormatError(f"{path}: expected a '{kind}' table, header is {lines[0]!r}")
    if head[2] != f"v{FORMAT_VERSION}":
        raise FormatError(f"{path}: unsupported version {head[2]}")
    try:
        sep = lines.index("---")
    except ValueError:
        raise FormatError(f"{path}: missing '---' separator") from None
    meta = {}
    for line in lines[1:sep]:
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    columns = lines[sep + 1].split(",")
    body = [list(map(float, ln.split(","))) for ln in lines[sep + 2:] if ln.strip()]
    rows = np.array(body, dtype=np.float64).reshape(-1, len(columns))
    return meta, columns, rows
