"""Shared fixtures and oracles for the test suite."""

import numpy as np
import pytest

from polyheat.scheme import ProblemData


def make_problem(diffusion=1.0, reaction=0.0, **kw):
    return ProblemData(diffusion=diffusion, reaction=reaction, **kw)


@pytest.fixture
def laplace_problem():
    return make_problem(1.0, 0.0)


def random_polygon(rng, n_vertices, star=True):
    """Random polygon with n vertices; star-shaped around its centre."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    while np.min(np.diff(angles, append=angles[0] + 2 * np.pi)) < 0.2:
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = rng.uniform(0.4, 1.0, n_vertices) if star else np.ones(n_vertices)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    scale = rng.uniform(0.5, 2.0)
    return pts * scale + rng.uniform(-1, 1, size=2)


def single_cell_space(verts, k, problem):
    """VemSpace over a one-cell mesh with the given polygon."""
    from polyheat.mesh import AdaptForest, PolyMesh
    from polyheat.vem import VemSpace
    forest = AdaptForest()
    ring = [forest.add_vertex(x, y) for x, y in verts]
    node = forest.new_node(tuple(ring))
    mesh = PolyMesh(forest.coords(), [ring], forest, [node])
    return VemSpace(mesh, k, problem)


def harmonic_extension_h1_projection(verts, trace_fn, fine=48):
    """Oracle for the k=1 H1 projector of a virtual basis function.

    Triangulates the polygon from its centroid, solves the Laplace problem
    with the given boundary trace with P1 elements, then H1-projects the
    solution onto affine polynomials (with boundary-mean constraint).
    """
    import scipy.sparse as sps
    import scipy.sparse.linalg as spla
    from polyheat.geometry import kernel_chebyshev, polygon_centroid, polygon_diameter

    fan, _ = kernel_chebyshev(verts)  # fan origin must see every edge
    centre = polygon_centroid(verts)  # scaled-monomial basis centre
    nv = len(verts)

    # structured triangulation of the kernel-point fan; nodes are identified
    # by wedge indices so shared rays never duplicate
    nodes = []
    node_index = {}
    m = fine

    def add_node(i, p, q):
        if p == 0 and q == 0:
            key = ("fan",)
        elif q == 0:
            key = ("axis", i, p)
        elif p == 0:
            key = ("axis", (i + 1) % nv, q)
        else:
            key = ("w", i, p, q)
        if key not in node_index:
            a, b = verts[i], verts[(i + 1) % nv]
            node_index[key] = len(nodes)
            nodes.append(fan + (a - fan) * p / m + (b - fan) * q / m)
        return node_index[key]

    tris = []
    for i in range(nv):
        for p in range(m):
            for q in range(m - p):
                i0 = add_node(i, p, q)
                i1 = add_node(i, p + 1, q)
                i2 = add_node(i, p, q + 1)
                tris.append((i0, i1, i2))
                if p + q < m - 1:
                    i3 = add_node(i, p + 1, q + 1)
                    tris.append((i1, i3, i2))
    nodes = np.array(nodes)

    # boundary values from the piecewise-linear trace over polygon edges
    def trace_at(p):
        for i in range(nv):
            a, b = verts[i], verts[(i + 1) % nv]
            ab = b - a
            t = np.dot(p - a, ab) / np.dot(ab, ab)
            if -1e-9 <= t <= 1 + 1e-9:
                proj = a + t * ab
                if np.linalg.norm(p - proj) < 1e-9:
                    return trace_fn(i, min(max(t, 0.0), 1.0))
        return None

    bvals = {}
    for j, p in enumerate(nodes):
        tv = trace_at(p)
        if tv is not None:
            bvals[j] = tv

    rows, cols, vals = [], [], []
    for tri in tris:
        coords = nodes[list(tri)]
        mat = np.hstack([np.ones((3, 1)), coords])
        area = 0.5 * abs(np.linalg.det(mat))
        grads = np.linalg.solve(mat, np.eye(3)[:, :])[1:, :]  # (2 x 3)
        ke = area * grads.T @ grads
        for a_ in range(3):
            for b_ in range(3):
                rows.append(tri[a_]); cols.append(tri[b_]); vals.append(ke[a_, b_])
    K = sps.coo_matrix((vals, (rows, cols)), shape=(len(nodes), len(nodes))).tocsr()
    free = np.array([j not in bvals for j in range(len(nodes))])
    u = np.zeros(len(nodes))
    for j, v in bvals.items():
        u[j] = v
    rhs = -(K @ u)[free]
    u[free] = spla.spsolve(K[free][:, free].tocsc(), rhs)

    # H1 projection onto P1 with boundary-mean constraint
    h = polygon_diameter(verts)
    gx_tot, gy_tot, area_tot = 0.0, 0.0, 0.0
    for tri in tris:
        coords = nodes[list(tri)]
        mat = np.hstack([np.ones((3, 1)), coords])
        area = 0.5 * abs(np.linalg.det(mat))
        grads = np.linalg.solve(mat, np.eye(3))[1:, :]
        g = grads @ u[list(tri)]
        gx_tot += area * g[0]
        gy_tot += area * g[1]
        area_tot += area
    gx, gy = gx_tot / area_tot, gy_tot / area_tot  # projected gradient (P1)

    # boundary mean of u and of the candidate polynomial
    per = 0.0
    mean_u = 0.0
    mean_x = np.zeros(2)
    for i in range(nv):
        a, b = verts[i], verts[(i + 1) % nv]
        ln = np.linalg.norm(b - a)
        per += ln
        mean_u += ln * 0.5 * (trace_fn(i, 0.0) + 2 * trace_fn(i, 0.5) * 2 + trace_fn(i, 1.0)) / 3
        # Simpson on the trace polynomial (quadratic at most for k=1 linear: exact)
        mean_x += ln * 0.5 * (a + b)
    mean_u = 0.0
    for i in range(nv):
        a, b = verts[i], verts[(i + 1) % nv]
        ln = np.linalg.norm(b - a)
        # trace is linear on each edge for k=1
        mean_u += ln * 0.5 * (trace_fn(i, 0.0) + trace_fn(i, 1.0))
    mean_u /= per
    mean_x /= per
    const = mean_u - gx * (mean_x[0] - centre[0]) - gy * (mean_x[1] - centre[1])
    # coefficients in the scaled monomial basis (1, (x-xc)/h, (y-yc)/h)
    return np.array([const, gx * h, gy * h])
