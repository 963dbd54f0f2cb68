"""Readers for the solver's CSV rows and POLYMESH snapshot files."""

import csv
from dataclasses import dataclass

import numpy as np

REQUIRED_COLUMNS = ("t", "n_cells", "err_LinfL2", "est_LinfL2",
                    "err_L2H1", "est_L2H1")


@dataclass
class RunData:
    """One run's time series, keyed by CSV column."""

    path: str
    columns: dict

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]

    @property
    def h(self) -> float:
        """Mesh size of a uniform square mesh with this cell count."""
        return float(np.sqrt(2.0 / self.columns["n_cells"][0]))

    def series(self, name: str) -> np.ndarray:
        return self.columns[name]


def read_run_csv(path: str) -> RunData:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    if not rows:
        raise ValueError(f"{path}: empty run file")
    missing = [c for c in REQUIRED_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    columns = {}
    for key in rows[0]:
        vals = [row[key] for row in rows]
        columns[key] = np.array([float(v) if v not in ("", None) else np.nan
                                 for v in vals])
    return RunData(path=path, columns=columns)


@dataclass
class MeshData:
    vertices: np.ndarray
    cells: list


def read_polymesh(path: str) -> MeshData:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh
                 if ln.strip() and not ln.lstrip().startswith("#")]
    if lines[0] != "POLYMESH 1":
        raise ValueError(f"{path}: not a POLYMESH 1 file")
    pos = 1
    nv = int(lines[pos]); pos += 1
    vertices = np.array([[float(x) for x in lines[pos + i].split()]
                         for i in range(nv)])
    pos += nv
    nc = int(lines[pos]); pos += 1
    cells = [[int(x) for x in lines[pos + i].split()] for i in range(nc)]
    return MeshData(vertices=vertices, cells=cells)
