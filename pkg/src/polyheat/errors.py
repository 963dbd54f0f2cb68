"""Exception types shared across the package."""


class PolyheatError(Exception):
    """Base class for all package errors."""


class MarkUnknownCell(PolyheatError):
    """A refinement/coarsening mark refers to a cell id not in the mesh."""


class UnrelatedMeshes(PolyheatError):
    """Two meshes do not belong to the same adaptation forest."""


class DegenerateCell(PolyheatError):
    """A polygon is too small or badly shaped for quadrature."""


class SingularG(PolyheatError):
    """The gradient-projector Gram system of a cell is singular."""


class SingularMass(PolyheatError):
    """A local mass system is numerically singular."""


class InternalError(PolyheatError):
    """Invariant violated inside the library."""


class SolverFail(PolyheatError):
    """A linear solve did not reach the requested tolerance."""


class LocalSolveFail(PolyheatError):
    """A local patch solve in a transfer operator failed."""


class FoldedElement(PolyheatError):
    """A moving-mesh step produced a cell with non-positive Jacobian."""


class CellBudgetExceeded(PolyheatError):
    """Refinement would exceed the configured cell budget."""


class NoExactSolution(PolyheatError):
    """True-error evaluation requested without an exact solution."""


class ConfigError(PolyheatError):
    """Invalid experiment configuration."""
