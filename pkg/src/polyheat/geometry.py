"""Plain polygon geometry helpers used by meshes, quadrature and checks."""

import numpy as np
from scipy.optimize import linprog


def polygon_area(verts: np.ndarray) -> float:
    """Signed area of a polygon given as an (n, 2) array of ccw vertices."""
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(verts: np.ndarray) -> np.ndarray:
    """Area centroid of a simple polygon."""
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    cx = np.sum((x + xn) * cross) / (6.0 * area)
    cy = np.sum((y + yn) * cross) / (6.0 * area)
    return np.array([cx, cy])


def polygon_diameter(verts: np.ndarray) -> float:
    """Maximum pairwise vertex distance."""
    d = verts[:, None, :] - verts[None, :, :]
    return float(np.sqrt((d * d).sum(axis=2)).max())


def kernel_chebyshev(verts: np.ndarray) -> tuple[np.ndarray, float]:
    """Centre and radius of the largest ball contained in the polygon kernel.

    The kernel of a (ccw) polygon is the intersection of the half-planes to
    the left of each directed edge.  The largest inscribed ball is found by
    the linear program  max r  s.t.  n_i . c - r >= -d_i  for unit inward
    normals n_i.  Returns radius 0.0 for polygons with empty kernel.
    """
    p0 = verts
    p1 = np.roll(verts, -1, axis=0)
    tang = p1 - p0
    lengths = np.linalg.norm(tang, axis=1)
    good = lengths > 0
    tang = tang[good] / lengths[good, None]
    # inward normal of a ccw edge
    normals = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    offsets = np.einsum("ij,ij->i", normals, p0[good])
    # variables (cx, cy, r): maximize r with n.c - r >= offset
    a_ub = np.hstack([-normals, np.ones((len(normals), 1))])
    b_ub = -offsets
    scale = polygon_diameter(verts)
    bounds = [(verts[:, 0].min() - scale, verts[:, 0].max() + scale),
              (verts[:, 1].min() - scale, verts[:, 1].max() + scale),
              (None, None)]
    res = linprog([0.0, 0.0, -1.0], A_ub=a_ub, b_ub=b_ub, bounds=bounds,
                  method="highs")
    if not res.success:
        return np.mean(verts, axis=0), 0.0
    return res.x[:2].copy(), max(0.0, float(res.x[2]))


def kernel_radius(verts: np.ndarray) -> float:
    return kernel_chebyshev(verts)[1]


def is_star_shaped(verts: np.ndarray, rho: float, h: float | None = None,
                   tol_factor: float = 1e-10) -> bool:
    """Check star-shapedness with respect to a ball of radius rho*h_E."""
    if h is None:
        h = polygon_diameter(verts)
    return kernel_radius(verts) >= rho * h - tol_factor * h


def point_in_polygon(point: np.ndarray, verts: np.ndarray, tol: float = 1e-12) -> bool:
    """Ray-crossing containment test, boundary-inclusive up to tol."""
    x, y = point
    n = len(verts)
    inside = False
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        # on-segment check
        dx, dy = x1 - x0, y1 - y0
        ln2 = dx * dx + dy * dy
        if ln2 > 0:
            t = ((x - x0) * dx + (y - y0) * dy) / ln2
            t = min(1.0, max(0.0, t))
            if (x - x0 - t * dx) ** 2 + (y - y0 - t * dy) ** 2 <= tol * tol:
                return True
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * dx / dy
            if x < xi:
                inside = not inside
    return inside


def point_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                     tol: float = 1e-10) -> bool:
    """True if p lies on the closed segment [a, b] within tol (absolute)."""
    ab = b - a
    ln = np.linalg.norm(ab)
    if ln == 0:
        return bool(np.linalg.norm(p - a) <= tol)
    t = np.dot(p - a, ab) / (ln * ln)
    if t < -tol / ln or t > 1 + tol / ln:
        return False
    proj = a + t * ab
    return bool(np.linalg.norm(p - proj) <= tol)


def segment_param(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Parameter t with p ~ a + t (b - a)."""
    ab = b - a
    return float(np.dot(p - a, ab) / np.dot(ab, ab))
