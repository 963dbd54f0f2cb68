"""Cross-mesh fields: projections over common coarsenings, overlay integrals
and the skeleton decomposition used by two-mesh estimator terms."""

from dataclasses import dataclass

import numpy as np

from .discrete import DiscreteFunction
from .geometry import point_on_segment, segment_param
from .quadrature import (PiecewisePolynomial, ScaledMonomialBasis,
                         gauss_legendre_01, poly_dim)


def _cell_contribution(space_or_mesh, field, cell: int, basis: ScaledMonomialBasis,
                       degree_quad: int):
    """(field, m_alpha)_K for all target monomials, field living on cell K."""
    if isinstance(field, DiscreteFunction):
        space = field.space
        ops = space.ops[cell]
        quad = ops.quad
        vals = ops.Phi_k @ (ops.Pi0k @ field.values[ops.dofs])
    else:  # PiecewisePolynomial
        mesh = field.mesh
        quad = mesh.cell_quadrature(cell, degree_quad)
        vals = field.eval_cell(cell, quad.points)
    m = basis.eval(quad.points)
    return m.T @ (quad.weights * vals), m.T @ (quad.weights[:, None] * m)


def fcc_projection(field, fcc, cover: list, k: int) -> PiecewisePolynomial:
    """L2 projection of a (projected) field onto broken P_k over fcc cells.

    field is a DiscreteFunction (its computable part Pi0_k is projected) or a
    PiecewisePolynomial; cover lists, per fcc cell, the source-mesh cells
    partitioning it.
    """
    out = PiecewisePolynomial(fcc, k)
    for f_cell in range(fcc.n_cells):
        basis = ScaledMonomialBasis(fcc.cell_centroid(f_cell),
                                    fcc.h_cell[f_cell], k)
        rhs = np.zeros(basis.dim)
        mass = np.zeros((basis.dim, basis.dim))
        for cell in cover[f_cell]:
            r, m = _cell_contribution(None, field, cell, basis, 2 * k + 2)
            rhs += r
            mass += m
        out.coeffs[f_cell] = np.linalg.solve(mass, rhs)
    return out


def eval_fcc_poly_on_cells(phat: PiecewisePolynomial, fcc_cell_of: np.ndarray,
                           mesh, cell: int, points: np.ndarray) -> np.ndarray:
    """Evaluate an fcc broken polynomial at points inside a target-mesh cell."""
    f_cell = int(fcc_cell_of[cell])
    return phat.eval_cell(f_cell, points)


def fcc_cell_index(fcc, cover: list, n_cells: int) -> np.ndarray:
    """Map target-mesh cell id -> containing fcc cell id."""
    out = np.full(n_cells, -1, dtype=int)
    for f_cell, members in enumerate(cover):
        for c in members:
            out[c] = f_cell
    return out


def overlay_l2_diff_sq(pieces, new_field, old_field, weights_new=None) -> float:
    """Integral of (new - old)^2 over the domain via overlay pieces.

    Both fields are evaluated as broken polynomials of their own meshes; an
    optional per-new-cell weight (e.g. h^4) multiplies each piece.
    """
    total = 0.0
    for geom_mesh, piece, c_new, c_old in pieces:
        degree = 2 * max(new_field.degree, old_field.degree)
        quad = geom_mesh.cell_quadrature(piece, degree)
        diff = new_field.eval_cell(c_new, quad.points) \
            - old_field.eval_cell(c_old, quad.points)
        w = 1.0 if weights_new is None else weights_new[c_new]
        total += w * float(quad.weights @ diff ** 2)
    return total


# ---------------------------------------------------------------------------
# skeleton decomposition of two related meshes
# ---------------------------------------------------------------------------

@dataclass
class SkeletonSegment:
    """Maximal segment of the union skeleton with its edge in each mesh."""

    va: int
    vb: int
    new_edge: int | None
    old_edge: int | None
    new_cell: int          # current-mesh cell whose size weights the segment
    on_new_skeleton: bool


def _vertices_on_edge(mesh, e: int, candidate_vertices, coords) -> list[int]:
    a, b = coords[mesh.edge_vertices[e]]
    hits = []
    for v in candidate_vertices:
        p = coords[v]
        if point_on_segment(p, a, b, 1e-10):
            t = segment_param(p, a, b)
            if 1e-10 < t < 1 - 1e-10:
                hits.append((t, v))
    hits.sort()
    return [v for _, v in hits]


def skeleton_soup(new, old, diff) -> list[SkeletonSegment]:
    """Decompose the union of the two skeletons into matched segments.

    Boundary-of-domain edges are skipped (jumps vanish there).  For nested
    modifications every segment is either an edge of both meshes, a sub-edge
    of a split old edge (carried by the matching new edges), an interior edge
    of a refined patch (new only), or a vanished interior edge of a merged
    patch (old only).
    """
    forest = new.forest
    coords = forest.coords()
    segments: list[SkeletonSegment] = []
    old_keys = {old.edge_key(e): e for e in range(old.n_edges)}
    new_of_node = {n: c for c, n in enumerate(new.cell_nodes)}
    old_of_node = {n: c for c, n in enumerate(old.cell_nodes)}

    matched_old = set()
    # new edges: identity match, sub-edge of a split old edge, or new-only
    for e in range(new.n_edges):
        if new.edge_is_boundary[e]:
            continue
        key = new.edge_key(e)
        a, b = (int(v) for v in new.edge_vertices[e])
        match = old_keys.get(key)
        if match is not None:
            segments.append(SkeletonSegment(a, b, e, match,
                                            int(new.edge_left[e]), True))
            matched_old.add(match)
            continue
        cand_old = set()
        for side in (new.edge_left[e], new.edge_right[e]):
            if side < 0:
                continue
            cover = forest.covering_cell(new.cell_nodes[int(side)], old_of_node)
            if cover is not None:
                cand_old.update(int(x) for x in old.cell_edges[cover])
        found = None
        for oe in cand_old:
            pa, pb = coords[old.edge_vertices[oe]]
            if point_on_segment(coords[a], pa, pb, 1e-10) and \
                    point_on_segment(coords[b], pa, pb, 1e-10):
                found = oe
                break
        if found is not None:
            matched_old.add(found)
        segments.append(SkeletonSegment(a, b, e, found, int(new.edge_left[e]), True))

    # old edges with no geometric presence in the new mesh (merged interiors)
    for e in diff.edges_only_in_old:
        if old.edge_is_boundary[e] or e in matched_old:
            continue
        a, b = (int(v) for v in old.edge_vertices[e])
        le = int(old.edge_left[e])
        cover = forest.covering_cell(old.cell_nodes[le], new_of_node)
        if cover is None:
            cover = int(new.locate_cell(0.5 * (coords[a] + coords[b])))
        segments.append(SkeletonSegment(a, b, None, e, cover, False))
    return segments


def segment_rule(coords, seg: SkeletonSegment, npts: int):
    a = coords[seg.va]
    b = coords[seg.vb]
    x, w = gauss_legendre_01(npts)
    pts = a[None, :] + x[:, None] * (b - a)[None, :]
    ln = np.linalg.norm(b - a)
    # canonical normal for the segment ordered va -> vb
    t = (b - a) / ln
    normal = np.array([t[1], -t[0]])
    return pts, w * ln, normal
