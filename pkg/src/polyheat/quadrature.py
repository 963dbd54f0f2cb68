"""Scaled monomial bases, polygon/edge quadrature and broken polynomial fields.

Polygon rules are built by fanning the polygon into triangles from its
centroid and placing a tensor Gauss(-Jacobi) rule on each triangle, which is
exact for the requested total degree.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .errors import DegenerateCell, InternalError
from .geometry import polygon_area, polygon_centroid, polygon_diameter

_triangle_rule_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
_gauss_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points/weights on [0, 1]."""
    if n not in _gauss_cache:
        x, w = leggauss(n)
        _gauss_cache[n] = ((x + 1.0) / 2.0, w / 2.0)
    return _gauss_cache[n]


def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on the reference triangle (0,0)-(1,0)-(0,1), exact for P_degree.

    Collapsed-square construction: Gauss-Legendre in one direction and
    Gauss-Jacobi (weight 1-x) in the other absorb the Jacobian exactly.
    """
    if degree not in _triangle_rule_cache:
        n = max(1, (degree + 2) // 2)
        xg, wg = leggauss(n)
        xg, wg = (xg + 1) / 2, wg / 2
        xj, wj = roots_jacobi(n, 1, 0)
        xj, wj = (xj + 1) / 2, wj / 4  # weight (1-x): affine map scales by 1/4
        pts = np.empty((n * n, 2))
        w = np.empty(n * n)
        k = 0
        for i in range(n):
            for j in range(n):
                x = xj[i]
                y = xg[j] * (1.0 - xj[i])
                pts[k] = (x, y)
                w[k] = wj[i] * wg[j]
                k += 1
        _triangle_rule_cache[degree] = (pts, w)
    return _triangle_rule_cache[degree]


@dataclass
class QuadratureRule:
    """Points (n, 2) and weights (n,) with a declared exactness degree."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)


def polygon_quadrature(verts: np.ndarray, degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree <= degree on the polygon."""
    h = polygon_diameter(verts)
    area = polygon_area(verts)
    if area < 1e-14 * h * h:
        raise DegenerateCell(f"polygon area {area:.3e} below tolerance for h={h:.3e}")
    c = polygon_centroid(verts)
    ref_pts, ref_w = triangle_rule(degree)
    pts = []
    wts = []
    n = len(verts)
    for i in range(n):
        a = verts[i]
        b = verts[(i + 1) % n]
        # affine map from reference triangle to (c, a, b)
        e1 = a - c
        e2 = b - c
        jac = e1[0] * e2[1] - e1[1] * e2[0]
        pts.append(c + np.outer(ref_pts[:, 0], e1) + np.outer(ref_pts[:, 1], e2))
        wts.append(ref_w * jac)
    return QuadratureRule(np.vstack(pts), np.concatenate(wts), degree)


def edge_quadrature(a: np.ndarray, b: np.ndarray, degree: int) -> QuadratureRule:
    """Gauss rule on segment [a, b], exact for P_degree, weights carry length."""
    n = max(1, (degree + 2) // 2)
    x, w = gauss_legendre_01(n)
    pts = a[None, :] + x[:, None] * (b - a)[None, :]
    return QuadratureRule(pts, w * np.linalg.norm(b - a), degree)


def monomial_exponents(degree: int) -> list[tuple[int, int]]:
    """Graded lexicographic multi-indices (a1, a2) with a1+a2 <= degree."""
    out = []
    for d in range(degree + 1):
        for a1 in range(d, -1, -1):
            out.append((a1, d - a1))
    return out


def poly_dim(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


class ScaledMonomialBasis:
    """Monomials m_a(x) = ((x - x_E)/h_E)^a on a cell, graded lex ordered."""

    def __init__(self, center: np.ndarray, h: float, degree: int):
        self.center = np.asarray(center, dtype=float)
        self.h = float(h)
        self.degree = int(degree)
        self.exponents = monomial_exponents(degree)
        self.dim = len(self.exponents)
        self._index = {a: i for i, a in enumerate(self.exponents)}

    def eval(self, points: np.ndarray) -> np.ndarray:
        """Values, shape (npts, dim)."""
        s = (np.atleast_2d(points) - self.center) / self.h
        cols = [s[:, 0] ** a1 * s[:, 1] ** a2 for a1, a2 in self.exponents]
        return np.stack(cols, axis=1)

    def eval_grad(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d/dx, d/dy) values, each (npts, dim)."""
        s = (np.atleast_2d(points) - self.center) / self.h
        gx = np.zeros((len(s), self.dim))
        gy = np.zeros((len(s), self.dim))
        for i, (a1, a2) in enumerate(self.exponents):
            if a1 > 0:
                gx[:, i] = a1 / self.h * s[:, 0] ** (a1 - 1) * s[:, 1] ** a2
            if a2 > 0:
                gy[:, i] = a2 / self.h * s[:, 0] ** a1 * s[:, 1] ** (a2 - 1)
        return gx, gy

    def derivative_matrix(self, axis: int) -> np.ndarray:
        """Coefficient map of d/dx_axis into the basis of degree-1 lower."""
        lower = monomial_exponents(self.degree - 1) if self.degree > 0 else []
        idx = {a: i for i, a in enumerate(lower)}
        mat = np.zeros((len(lower), self.dim))
        for j, (a1, a2) in enumerate(self.exponents):
            if axis == 0 and a1 > 0:
                mat[idx[(a1 - 1, a2)], j] = a1 / self.h
            if axis == 1 and a2 > 0:
                mat[idx[(a1, a2 - 1)], j] = a2 / self.h
        return mat

    def laplacian_matrix(self) -> np.ndarray:
        """Coefficient map of the Laplacian into the degree-2 lower basis."""
        if self.degree < 2:
            return np.zeros((0, self.dim))
        lower = monomial_exponents(self.degree - 2)
        idx = {a: i for i, a in enumerate(lower)}
        mat = np.zeros((len(lower), self.dim))
        for j, (a1, a2) in enumerate(self.exponents):
            if a1 >= 2:
                mat[idx[(a1 - 2, a2)], j] += a1 * (a1 - 1) / self.h ** 2
            if a2 >= 2:
                mat[idx[(a1, a2 - 2)], j] += a2 * (a2 - 1) / self.h ** 2
        return mat

    def embed_matrix(self, target_degree: int) -> np.ndarray:
        """Injection of coefficients into the same-cell basis of higher degree."""
        target = monomial_exponents(target_degree)
        idx = {a: i for i, a in enumerate(target)}
        mat = np.zeros((len(target), self.dim))
        for j, a in enumerate(self.exponents):
            mat[idx[a], j] = 1.0
        return mat


def monomial_mass(basis: ScaledMonomialBasis, quad: QuadratureRule,
                  weight: np.ndarray | None = None) -> np.ndarray:
    """Mass matrix (m_i, m_j) of the basis, optionally weighted pointwise."""
    phi = basis.eval(quad.points)
    w = quad.weights if weight is None else quad.weights * weight
    return phi.T @ (w[:, None] * phi)


def l2_project_poly(f, verts: np.ndarray, degree: int,
                    quad_degree: int | None = None) -> np.ndarray:
    """Coefficients of the L2(E) projection of f onto P_degree(E).

    f is a callable taking an (n, 2) array of points.  Returns coefficients in
    the cell's scaled monomial basis.  The default rule is generous so that
    smooth non-polynomial data is integrated well below estimator tolerances.
    """
    if quad_degree is None:
        quad_degree = 2 * degree + 8
    basis = ScaledMonomialBasis(polygon_centroid(verts), polygon_diameter(verts), degree)
    quad = polygon_quadrature(verts, quad_degree)
    mass = monomial_mass(basis, quad)
    rhs = basis.eval(quad.points).T @ (quad.weights * np.asarray(f(quad.points)))
    try:
        coeffs = np.linalg.solve(mass, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise InternalError("singular local mass system") from exc
    if not np.all(np.isfinite(coeffs)):
        raise InternalError("non-finite projection coefficients")
    return coeffs


class PiecewisePolynomial:
    """Broken polynomial field: one coefficient vector per mesh cell.

    Coefficients are in each cell's own scaled monomial basis of the given
    degree; no continuity across cells is implied.
    """

    def __init__(self, mesh, degree: int, coeffs: np.ndarray | None = None):
        self.mesh = mesh
        self.degree = int(degree)
        self.dim = poly_dim(degree)
        if coeffs is None:
            coeffs = np.zeros((mesh.n_cells, self.dim))
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (mesh.n_cells, self.dim):
            raise InternalError("coefficient array shape mismatch")

    def basis(self, cell: int) -> ScaledMonomialBasis:
        cache = getattr(self.mesh, "_basis_cache", None)
        if cache is None:
            cache = self.mesh._basis_cache = {}
        key = (cell, self.degree)
        if key not in cache:
            cache[key] = ScaledMonomialBasis(self.mesh.cell_centroid(cell),
                                             self.mesh.h_cell[cell], self.degree)
        return cache[key]

    def eval_cell(self, cell: int, points: np.ndarray) -> np.ndarray:
        return self.basis(cell).eval(points) @ self.coeffs[cell]

    def eval_grad_cell(self, cell: int, points: np.ndarray) -> np.ndarray:
        gx, gy = self.basis(cell).eval_grad(points)
        return np.stack([gx @ self.coeffs[cell], gy @ self.coeffs[cell]], axis=1)

    def __add__(self, other: "PiecewisePolynomial") -> "PiecewisePolynomial":
        self._check_compatible(other)
        return PiecewisePolynomial(self.mesh, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other: "PiecewisePolynomial") -> "PiecewisePolynomial":
        self._check_compatible(other)
        return PiecewisePolynomial(self.mesh, self.degree, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "PiecewisePolynomial":
        return PiecewisePolynomial(self.mesh, self.degree, self.coeffs * c)

    __rmul__ = __mul__

    def _check_compatible(self, other: "PiecewisePolynomial") -> None:
        if other.mesh is not self.mesh or other.degree != self.degree:
            raise InternalError("incompatible broken polynomial operands")

    def l2_norm_sq(self, cell_weights: np.ndarray | None = None) -> float:
        """Integral of the square, optionally scaled per cell."""
        total = 0.0
        for c in range(self.mesh.n_cells):
            quad = self.mesh.cell_quadrature(c, 2 * self.degree)
            vals = self.eval_cell(c, quad.points)
            contrib = float(quad.weights @ vals ** 2)
            if cell_weights is not None:
                contrib *= cell_weights[c]
            total += contrib
        return total
