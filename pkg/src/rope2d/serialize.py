"""Shared JSON/CSV readers and writers for tables, reports, and traces.

All CSV files carry a header row and use 17-significant-digit floats so
that values round-trip exactly through text.
"""

import csv
import json

import numpy as np


def format_float(value) -> str:
    """Decimal string with 17 significant digits (round-trips a double)."""
    return f"{float(value):.17g}"


def write_csv(path, header, rows) -> None:
    """Write already-formatted cells with a header line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def matrix_rows(matrix) -> list:
    """Format a 2D array as CSV cells, row-major."""
    return [[format_float(v) for v in row] for row in np.asarray(matrix)]


def matrix_header(n_cols, prefix="c") -> list:
    return [f"{prefix}{j}" for j in range(n_cols)]


def read_matrix_csv(path) -> np.ndarray:
    """Read a float matrix written with `matrix_rows` (header skipped)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        data = [[float(cell) for cell in row] for row in reader]
    if not data:
        raise ValueError(f"no data rows in {path}")
    return np.asarray(data, dtype=float)
