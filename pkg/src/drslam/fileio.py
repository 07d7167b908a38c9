"""Trajectory and table file I/O.

TUM line format: ``timestamp tx ty tz qx qy qz qw``, space-separated, 17
significant digits (lossless for float64).
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .geometry import Pose


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def tum_line(timestamp: float, pose: Pose) -> str:
    w, x, y, z = pose.q
    tx, ty, tz = pose.t
    return " ".join(fmt(v) for v in (timestamp, tx, ty, tz, x, y, z, w))


def write_tum(path, rows) -> None:
    """rows: iterable of (timestamp, Pose)."""
    with open(path, "w") as f:
        for ts, pose in rows:
            f.write(tum_line(ts, pose) + "\n")


def read_tum(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"expected 8 fields, got {len(parts)}", path=str(path), line=lineno)
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            except ValueError as e:
                raise FormatError(f"non-numeric field: {e}", path=str(path), line=lineno) from e
            rows.append((ts, Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return rows


def write_csv(path, header, rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def read_csv(path, expected_header):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header.split(",") != list(expected_header):
            raise FormatError(
                f"bad header: expected {','.join(expected_header)}, got {header}",
                path=str(path), line=1)
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(expected_header):
                raise FormatError(
                    f"expected {len(expected_header)} columns, got {len(parts)}",
                    path=str(path), line=lineno)
            rows.append(parts)
    return rows
