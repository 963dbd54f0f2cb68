"""Discrete functions and shared linear-algebra helpers."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import SolverFail


@dataclass
class DiscreteFunction:
    """Coefficient vector bound to a discrete space (one value per DoF)."""

    space: object
    values: np.ndarray

    def copy(self) -> "DiscreteFunction":
        return DiscreteFunction(self.space, self.values.copy())

    def __add__(self, other):
        assert other.space is self.space
        return DiscreteFunction(self.space, self.values + other.values)

    def __sub__(self, other):
        assert other.space is self.space
        return DiscreteFunction(self.space, self.values - other.values)

    def __mul__(self, c: float):
        return DiscreteFunction(self.space, self.values * c)

    __rmul__ = __mul__


class InteriorSolver:
    """Direct factorization of the interior block of a symmetric operator."""

    def __init__(self, matrix: sps.spmatrix, interior: np.ndarray):
        self.interior = interior
        self.matrix = matrix.tocsr()
        self.block = self.matrix[interior][:, interior].tocsc()
        if self.block.shape[0] > 0:
            self.factor = spla.splu(self.block)
        else:
            self.factor = None

    def solve(self, rhs_interior: np.ndarray) -> np.ndarray:
        if self.factor is None:
            return np.zeros(0)
        x = self.factor.solve(rhs_interior)
        if not np.all(np.isfinite(x)):
            raise SolverFail("direct solve produced non-finite values")
        return x

    def solve_full(self, rhs_full: np.ndarray,
                   boundary_values: np.ndarray | None = None) -> np.ndarray:
        """Solve with Dirichlet data eliminated; returns a full DoF vector."""
        n = self.matrix.shape[0]
        out = np.zeros(n)
        if boundary_values is not None:
            out[~self.interior] = boundary_values[~self.interior]
            rhs = rhs_full[self.interior] - \
                (self.matrix @ out)[self.interior]
        else:
            rhs = rhs_full[self.interior]
        out[self.interior] = self.solve(rhs)
        return out
