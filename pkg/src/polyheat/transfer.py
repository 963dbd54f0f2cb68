"""Solution transfer operators between consecutive discrete spaces.

Three computable VEM transfers: the local (Lagrange-read coarsening plus
locally solved refinement) operator, the broken polynomial projection over
the finest common coarsening, and the elliptic transfer; the FEM backend
reuses its own elliptic transfer.
"""

import numpy as np

from .crossmesh import fcc_cell_index, fcc_projection
from .discrete import DiscreteFunction
from .errors import LocalSolveFail, UnrelatedMeshes
from .mesh import finest_common_coarsening
from .quadrature import PiecewisePolynomial


def _edge_trace_coeffs(space, values, e: int) -> np.ndarray:
    """Trace polynomial coefficients (in the edge parameter) from edge DoFs."""
    a, b = (int(v) for v in space.mesh.edge_vertices[e])
    va = values[space.vertex_dof[a]]
    vb = values[space.vertex_dof[b]]
    if space.k == 1:
        return np.array([va, vb - va])
    m = values[space.edge_dofs(e)[0]]
    bq = 6 * m - 4 * va - 2 * vb
    cq = 3 * va + 3 * vb - 6 * m
    return np.array([va, bq, cq])


def _trace_eval(coeffs: np.ndarray, s):
    out = np.zeros_like(np.asarray(s, dtype=float))
    for c in reversed(coeffs):
        out = out * s + c
    return out


def _trace_mean(coeffs: np.ndarray, s0: float, s1: float) -> float:
    """Mean of the trace polynomial over the sub-interval [s0, s1]."""
    anti = np.concatenate([[0.0], coeffs / np.arange(1, len(coeffs) + 1)])

    def F(s):
        return sum(anti[i] * s ** i for i in range(len(anti)))

    return (F(s1) - F(s0)) / (s1 - s0)


def _cell_moment_against(space, values, cell: int, basis, n_moments: int):
    """(Pi0_k v, m_alpha)_K for target monomials m_alpha (exact on P_k)."""
    ops = space.ops[cell]
    coeffs = ops.Pi0k @ values[ops.dofs]
    vals = ops.Phi_k @ coeffs
    m = basis.eval(ops.quad.points)[:, :n_moments]
    return m.T @ (ops.quad.weights * vals)


def local_transfer(old_space, new_space, forest, v: DiscreteFunction) -> DiscreteFunction:
    """Cellwise Lagrange-style transfer (coarsening reads, refinement solves)."""
    old_mesh, new_mesh = old_space.mesh, new_space.mesh
    if old_mesh is new_mesh:
        return DiscreteFunction(new_space, v.values.copy())
    if forest is None or old_mesh.forest is not forest or new_mesh.forest is not forest:
        raise UnrelatedMeshes("local transfer requires meshes of one forest")

    out = np.zeros(new_space.ndofs)
    vals = v.values
    old_of_node = {n: c for c, n in enumerate(old_mesh.cell_nodes)}
    coords = forest.coords()

    # old global edge lookup for trace reads
    old_edge_of_key = {old_mesh.edge_key(e): e for e in range(old_mesh.n_edges)}

    def read_trace_on_old_edge(containing_edge, pts_vertex_ids, target):
        """Vertex values of new vertices lying on an old edge."""
        a, b = coords[old_mesh.edge_vertices[containing_edge]]
        coeffs = _edge_trace_coeffs(old_space, vals, containing_edge)
        from .geometry import segment_param
        for vid in pts_vertex_ids:
            s = segment_param(coords[vid], a, b)
            target[new_space.vertex_dof[vid]] = _trace_eval(coeffs, s)

    def locate_old_edge(cell_old, vid_a, vid_b):
        """Old edge of cell_old containing the segment (vid_a, vid_b)."""
        from .geometry import point_on_segment
        pa, pb = coords[vid_a], coords[vid_b]
        for e in old_mesh.cell_edges[cell_old]:
            qa, qb = coords[old_mesh.edge_vertices[e]]
            if point_on_segment(pa, qa, qb, 1e-10) and \
                    point_on_segment(pb, qa, qb, 1e-10):
                return int(e)
        raise LocalSolveFail("patch boundary segment not on parent boundary")

    refine_patches: dict[int, list[int]] = {}  # old cell -> new child cells
    for c_new, node in enumerate(new_mesh.cell_nodes):
        if node in old_of_node:
            _copy_unchanged_cell(old_space, new_space, vals, out, c_new,
                                 old_of_node[node], old_edge_of_key,
                                 locate_old_edge_fn=locate_old_edge)
            continue
        fnode = forest.nodes[node]
        members = None
        if fnode.merge_children and all(ch in old_of_node for ch in fnode.merge_children):
            members = fnode.merge_children
        elif fnode.split_children and all(ch in old_of_node for ch in fnode.split_children):
            members = fnode.split_children  # re-coarsened refinement patch
        if members is not None:
            _coarsen_read(old_space, new_space, vals, out, c_new,
                          [old_of_node[ch] for ch in members])
            continue
        parent = fnode.split_parent
        if parent is None or parent not in old_of_node:
            # split-back of an agglomerate: the old cell is the merge node
            parent_candidates = [p for p in forest.up_closure(node) if p in old_of_node]
            if not parent_candidates:
                raise UnrelatedMeshes("new cell has no counterpart in the old mesh")
            parent_cell = old_of_node[parent_candidates[0]]
        else:
            parent_cell = old_of_node[parent]
        refine_patches.setdefault(parent_cell, []).append(c_new)

    for c_old, children in sorted(refine_patches.items()):
        _refine_solve(old_space, new_space, vals, out, c_old, children,
                      locate_old_edge, read_trace_on_old_edge)
    return DiscreteFunction(new_space, out)


def _copy_unchanged_cell(old_space, new_space, vals, out, c_new, c_old,
                         old_edge_of_key, locate_old_edge_fn) -> None:
    """Copy DoFs of a geometrically unchanged cell; fill new hanging DoFs."""
    new_mesh, old_mesh = new_space.mesh, old_space.mesh
    ring = [int(x) for x in new_mesh.cells[c_new]]
    old_vdofs = old_space.vertex_dof
    for vid in ring:
        ndof = new_space.vertex_dof[vid]
        if vid in old_vdofs:
            out[ndof] = vals[old_vdofs[vid]]
        else:
            # hanging vertex introduced by a refined neighbour: read the trace
            e_old = locate_old_edge_fn(c_old, vid, vid)
            a, b = old_mesh.forest.coords()[old_mesh.edge_vertices[e_old]]
            from .geometry import segment_param
            s = segment_param(old_mesh.forest.coords()[vid], a, b)
            out[ndof] = _trace_eval(_edge_trace_coeffs(old_space, vals, e_old), s)
    if new_space.n_moments_edge:
        from .geometry import segment_param
        coords = new_mesh.forest.coords()
        for e in new_mesh.cell_edges[c_new]:
            key = new_mesh.edge_key(int(e))
            match = old_edge_of_key.get(key)
            if match is not None:
                out[new_space.edge_dofs(int(e))[0]] = \
                    vals[old_space.edge_dofs(match)[0]]
            else:
                va, vb = (int(x) for x in new_mesh.edge_vertices[int(e)])
                e_old = locate_old_edge_fn(c_old, va, vb)
                a, b = coords[old_mesh.edge_vertices[e_old]]
                s0, s1 = segment_param(coords[va], a, b), segment_param(coords[vb], a, b)
                coeffs = _edge_trace_coeffs(old_space, vals, e_old)
                out[new_space.edge_dofs(int(e))[0]] = _trace_mean(coeffs, s0, s1)
    if new_space.n_moments_cell:
        nb = new_space.cell_dof_base + new_space.n_moments_cell * c_new
        ob = old_space.cell_dof_base + old_space.n_moments_cell * c_old
        out[nb:nb + new_space.n_moments_cell] = vals[ob:ob + old_space.n_moments_cell]


def _coarsen_read(old_space, new_space, vals, out, c_new, members) -> None:
    """Lagrange read of the agglomerate DoFs from the patch function.

    Ring vertices introduced by a same-step refinement of a neighbour are
    hanging points on old patch edges; their values come from the traces.
    """
    new_mesh, old_mesh = new_space.mesh, old_space.mesh
    coords = new_mesh.forest.coords()
    from .geometry import point_on_segment, segment_param

    def containing_old_edge(p_ids):
        for c_old in members:
            for e in old_mesh.cell_edges[c_old]:
                qa, qb = coords[old_mesh.edge_vertices[e]]
                if all(point_on_segment(coords[v], qa, qb, 1e-10) for v in p_ids):
                    return int(e)
        raise LocalSolveFail("agglomerate boundary point not on a patch edge")

    ring = [int(x) for x in new_mesh.cells[c_new]]
    for vid in ring:
        if vid in old_space.vertex_dof:
            out[new_space.vertex_dof[vid]] = vals[old_space.vertex_dof[vid]]
        else:
            e_old = containing_old_edge([vid])
            a, b = coords[old_mesh.edge_vertices[e_old]]
            s = segment_param(coords[vid], a, b)
            out[new_space.vertex_dof[vid]] = _trace_eval(
                _edge_trace_coeffs(old_space, vals, e_old), s)
    if new_space.n_moments_edge:
        old_edge_of_key = {old_mesh.edge_key(e): e
                           for c in members for e in old_mesh.cell_edges[c]}
        for e in new_mesh.cell_edges[c_new]:
            match = old_edge_of_key.get(new_mesh.edge_key(int(e)))
            if match is not None:
                out[new_space.edge_dofs(int(e))[0]] = \
                    vals[old_space.edge_dofs(int(match))[0]]
            else:
                va, vb = (int(x) for x in new_mesh.edge_vertices[int(e)])
                e_old = containing_old_edge([va, vb])
                a, b = coords[old_mesh.edge_vertices[e_old]]
                s0 = segment_param(coords[va], a, b)
                s1 = segment_param(coords[vb], a, b)
                out[new_space.edge_dofs(int(e))[0]] = _trace_mean(
                    _edge_trace_coeffs(old_space, vals, e_old), s0, s1)
    if new_space.n_moments_cell:
        from .quadrature import ScaledMonomialBasis
        basis = ScaledMonomialBasis(new_mesh.cell_centroid(c_new),
                                    new_mesh.h_cell[c_new], new_space.k)
        area = float(new_mesh.cell_area[c_new])
        moments = np.zeros(new_space.n_moments_cell)
        for c_old in members:
            moments += _cell_moment_against(old_space, vals, c_old, basis,
                                            new_space.n_moments_cell)
        nb = new_space.cell_dof_base + new_space.n_moments_cell * c_new
        out[nb:nb + new_space.n_moments_cell] = moments / area


def _refine_solve(old_space, new_space, vals, out, c_old, children,
                  locate_old_edge, read_trace) -> None:
    """Refinement operator: boundary trace kept, interior solved locally."""
    new_mesh = new_space.mesh
    coords = new_mesh.forest.coords()
    old_vdofs = old_space.vertex_dof

    patch_dofs: list[int] = []
    seen = set()
    for c in children:
        for d in new_space.cell_dofs(c):
            if d not in seen:
                seen.add(d)
                patch_dofs.append(d)
    patch_index = {d: i for i, d in enumerate(patch_dofs)}

    # patch-boundary entities: edges of children with the outside not in patch
    child_set = set(children)
    boundary_edges = []
    interior_edges = []
    for c in children:
        for e in new_mesh.cell_edges[c]:
            le, ri = int(new_mesh.edge_left[int(e)]), int(new_mesh.edge_right[int(e)])
            other = ri if le == c else le
            (boundary_edges if other not in child_set else interior_edges).append(int(e))
    boundary_edges = sorted(set(boundary_edges))
    boundary_vertices = sorted({int(v) for e in boundary_edges
                                for v in new_mesh.edge_vertices[e]})

    fixed = np.zeros(len(patch_dofs))
    fixed_mask = np.zeros(len(patch_dofs), dtype=bool)

    from .geometry import segment_param
    for vid in boundary_vertices:
        d = new_space.vertex_dof[vid]
        i = patch_index[d]
        fixed_mask[i] = True
        if vid in old_vdofs:
            fixed[i] = vals[old_vdofs[vid]]
        else:
            e_old = locate_old_edge(c_old, vid, vid)
            a, b = coords[old_space.mesh.edge_vertices[e_old]]
            s = segment_param(coords[vid], a, b)
            fixed[i] = _trace_eval(_edge_trace_coeffs(old_space, vals, e_old), s)
    if new_space.n_moments_edge:
        for e in boundary_edges:
            d = new_space.edge_dofs(e)[0]
            i = patch_index[d]
            fixed_mask[i] = True
            va, vb = (int(x) for x in new_mesh.edge_vertices[e])
            e_old = locate_old_edge(c_old, va, vb)
            a, b = coords[old_space.mesh.edge_vertices[e_old]]
            s0, s1 = segment_param(coords[va], a, b), segment_param(coords[vb], a, b)
            fixed[i] = _trace_mean(_edge_trace_coeffs(old_space, vals, e_old), s0, s1)

    # assemble the patch stiffness over local dofs
    n_loc = len(patch_dofs)
    A = np.zeros((n_loc, n_loc))
    for c in children:
        ops = new_space.ops[c]
        idx = [patch_index[d] for d in ops.dofs]
        A[np.ix_(idx, idx)] += ops.A_loc

    # right-hand side A_h^E(v, C w) couples through the parent cell moments
    rhs = np.zeros(n_loc)
    ops_old = old_space.ops[c_old]
    if new_space.n_moments_cell:
        from .quadrature import ScaledMonomialBasis
        basis_E = ScaledMonomialBasis(old_space.mesh.cell_centroid(c_old),
                                      old_space.mesh.h_cell[c_old], old_space.k)
        area_E = float(old_space.mesh.cell_area[c_old])
        # row vectors mu[j] = M^E_alpha(w_j) over patch dofs
        mom_rows = np.zeros((old_space.n_moments_cell, n_loc))
        for c in children:
            ops = new_space.ops[c]
            m_vals = basis_E.eval(ops.quad.points)[:, :old_space.n_moments_cell]
            block = (m_vals.T @ (ops.quad.weights[:, None]
                                 * (ops.Phi_k @ ops.Pi0k))) / area_E
            idx = [patch_index[d] for d in ops.dofs]
            mom_rows[:, idx] += block
        cell_base = old_space.cell_dof_base + old_space.n_moments_cell * c_old
        loc_old = vals[ops_old.dofs]
        a_cols = ops_old.A_loc @ loc_old
        local_moment_slots = [list(ops_old.dofs).index(cell_base + i)
                              for i in range(old_space.n_moments_cell)]
        for i, slot in enumerate(local_moment_slots):
            rhs += a_cols[slot] * mom_rows[i]

    free = ~fixed_mask
    b = rhs - A @ (fixed * fixed_mask)
    A_ff = A[np.ix_(free, free)]
    b_f = b[free]

    if new_space.n_moments_cell:
        # conserve the parent cell moments exactly (see decisions ledger)
        targets = np.array([vals[old_space.cell_dof_base
                                 + old_space.n_moments_cell * c_old + i]
                            for i in range(old_space.n_moments_cell)])
        C_rows = mom_rows[:, free]
        c_fixed = mom_rows[:, ~free] @ fixed[~free]
        nm = old_space.n_moments_cell
        sys = np.zeros((A_ff.shape[0] + nm, A_ff.shape[0] + nm))
        sys[:A_ff.shape[0], :A_ff.shape[0]] = A_ff
        sys[:A_ff.shape[0], A_ff.shape[0]:] = C_rows.T
        sys[A_ff.shape[0]:, :A_ff.shape[0]] = C_rows
        vec = np.concatenate([b_f, targets - c_fixed])
        try:
            sol = np.linalg.solve(sys, vec)
        except np.linalg.LinAlgError as exc:
            raise LocalSolveFail(f"patch solve failed on cell {c_old}") from exc
        x = sol[:A_ff.shape[0]]
    else:
        try:
            x = np.linalg.solve(A_ff, b_f)
        except np.linalg.LinAlgError as exc:
            raise LocalSolveFail(f"patch solve failed on cell {c_old}") from exc

    full = fixed.copy()
    full[free] = x
    for d, i in patch_index.items():
        out[d] = full[i]


def l2_poly_transfer(old_space, new_space, v: DiscreteFunction,
                     fcc=None, boundary_values=None) -> DiscreteFunction:
    """Broken polynomial projection over the fcc followed by mass recovery."""
    if old_space.mesh.forest is not new_space.mesh.forest:
        raise UnrelatedMeshes("transfer requires meshes of one forest")
    if fcc is None:
        fcc = finest_common_coarsening(new_space.mesh, old_space.mesh)
    phat = fcc_projection(v, fcc, fcc.cover_b, old_space.k)
    return _recon_from_fcc(new_space, phat, fcc, boundary_values)


def _recon_from_fcc(new_space, phat: PiecewisePolynomial, fcc,
                    boundary_values=None) -> DiscreteFunction:
    """Solve m_h(w, phi) = (phat, phi) where phat is broken over fcc cells."""
    idx = fcc_cell_index(fcc, fcc.cover_a, new_space.mesh.n_cells)
    rhs = np.zeros(new_space.ndofs)
    for c, ops in enumerate(new_space.ops):
        vals = phat.eval_cell(int(idx[c]), ops.quad.points)
        rhs[ops.dofs] += ops.Pi0k.T @ (ops.Phi_k.T @ (ops.quad.weights * vals))
    out = new_space.mass_solver().solve_full(rhs, boundary_values)
    return DiscreteFunction(new_space, out)


def vem_elliptic_transfer(old_space, new_space, v: DiscreteFunction, problem,
                          t_prev: float, fcc=None) -> DiscreteFunction:
    """Elliptic transfer: stiffness solve against the projected reconstruction
    data of the previous step."""
    if old_space.mesh.forest is not new_space.mesh.forest:
        raise UnrelatedMeshes("transfer requires meshes of one forest")
    if fcc is None:
        fcc = finest_common_coarsening(new_space.mesh, old_space.mesh)
    f_prev = problem.forcing_at(t_prev)
    fhat_old = old_space.project_data(f_prev)
    fhat_new = new_space.project_data(f_prev)
    lh_old = old_space.discrete_laplacian(v)
    p_old = old_space.l2_recon(fhat_old)
    p_new = new_space.l2_recon(fhat_new)

    phat = fcc_projection(lh_old, fcc, fcc.cover_b, old_space.k) \
        + fcc_projection(p_old, fcc, fcc.cover_b, old_space.k) \
        - fcc_projection(fhat_old, fcc, fcc.cover_b, old_space.k) \
        - fcc_projection(p_new, fcc, fcc.cover_a, new_space.k) \
        + fcc_projection(fhat_new, fcc, fcc.cover_a, new_space.k)

    idx = fcc_cell_index(fcc, fcc.cover_a, new_space.mesh.n_cells)
    rhs = np.zeros(new_space.ndofs)
    for c, ops in enumerate(new_space.ops):
        vals = phat.eval_cell(int(idx[c]), ops.quad.points)
        rhs[ops.dofs] -= ops.Pi0k.T @ (ops.Phi_k.T @ (ops.quad.weights * vals))
    from .discrete import InteriorSolver
    solver = InteriorSolver(new_space.a_mat, new_space.interior)
    return DiscreteFunction(new_space, solver.solve_full(rhs))


def apply_transfer(kind: str, prev_state, new_space, problem) -> DiscreteFunction:
    """Dispatch by transfer kind; identity fast path on an unchanged space."""
    old_space = prev_state.space
    v = prev_state.U
    if new_space is old_space and kind in ("local", "identity"):
        return DiscreteFunction(new_space, v.values.copy())
    if new_space.kind == "fem":
        from .fem import fem_elliptic_transfer
        g = problem.boundary_values_at(prev_state.t)
        bv = None
        if g is not None:
            lifted = new_space.interpolate(g, zero_boundary=False)
            bv = np.where(new_space.boundary_mask, lifted.values, 0.0)
        return fem_elliptic_transfer(old_space, new_space, v, problem,
                                     prev_state.t, boundary_values=bv)
    if kind in ("local", "identity"):
        return local_transfer(old_space, new_space, new_space.mesh.forest, v)
    if kind == "l2poly":
        return l2_poly_transfer(old_space, new_space, v)
    if kind == "elliptic":
        return vem_elliptic_transfer(old_space, new_space, v, problem, prev_state.t)
    raise ValueError(f"unknown transfer kind {kind!r}")
