"""Bundled parameter tables of the published optima, row by row."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib.resources import files

import numpy as np

TABLES = {"eff1": "discovered_fig2", "robust": "robust_fig3"}


@dataclass(frozen=True)
class GoldenRow:
    loss: float
    key_rate: float
    phi: np.ndarray  # circuit slots followed by the flip probability

    @property
    def efficiency(self) -> float:
        return 1.0 - self.loss


def load_table(table: str) -> list[GoldenRow]:
    """Rows of ``eff1`` (three-mode circuit) or ``robust`` (two-mode circuit)."""
    if table not in TABLES:
        raise KeyError(f"unknown table {table!r}; choose from {sorted(TABLES)}")
    text = (files("diqkd_forge") / "data" / f"golden_{TABLES[table]}.csv").read_text()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        values = [float(v) for k, v in rec.items() if k not in ("loss", "key_rate")]
        rows.append(GoldenRow(float(rec["loss"]), float(rec["key_rate"]), np.array(values)))
    return rows


def row_at(table: str, loss: float) -> GoldenRow:
    for row in load_table(table):
        if abs(row.loss - loss) < 1e-12:
            return row
    raise KeyError(f"table {table!r} has no row at loss {loss}")


def tolerance_ok(computed: float, expected: float) -> bool:
    """1e-4 absolute or 1% relative above 1e-6; 5% relative below."""
    diff = abs(computed - expected)
    if expected >= 1e-6:
        return diff <= max(1e-4, 1e-2 * abs(expected))
    return diff <= 0.05 * abs(expected)
