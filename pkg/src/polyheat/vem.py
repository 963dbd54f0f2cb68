"""Virtual element space of order k in {1, 2} on a polygonal mesh.

Everything is driven by degrees of freedom: vertex values, edge means
(k = 2) and cell moments (k = 2).  Projectors onto polynomials are the only
way function values are ever accessed, so all operators stay computable on
hanging-vertex polygons and agglomerates.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from .discrete import DiscreteFunction, InteriorSolver
from .errors import InternalError, SingularG
from .mesh import PolyMesh
from .quadrature import (PiecewisePolynomial, ScaledMonomialBasis,
                         edge_quadrature, monomial_exponents, poly_dim)


class LocalVemOps:
    """Projector and form matrices of a single cell.

    Attributes map DoF vectors to scaled-monomial coefficients (PiNabla,
    Pi0k, Pi0km1, Pi0grad_x/y) or act on DoF vectors directly (A_loc, M_loc,
    Q for the stabilization slot).
    """

    __slots__ = ("cell", "dofs", "basis", "basis_km1", "quad", "area",
                 "PiNabla", "Pi0k", "Pi0km1", "Pi0grad_x", "Pi0grad_y",
                 "Dmat", "Q", "A_loc", "M_loc", "Mass_poly", "Mass_km1",
                 "sigma", "a_min", "a_max", "r_min", "r_max", "Phi_k",
                 "Phi_km1", "h")

    def slot_m_norm_sq(self, local_values: np.ndarray) -> float:
        """m_h-norm squared of the non-polynomial part (I - Pi0k) v."""
        w = self.Q @ local_values
        return float(w @ (self.M_loc @ w))

    def slot_a_norm_sq(self, local_values: np.ndarray) -> float:
        """A_h-norm squared of the non-polynomial part (I - Pi0k) v."""
        w = self.Q @ local_values
        return float(w @ (self.A_loc @ w))


class VemSpace:
    """Conforming virtual element space with homogeneous-Dirichlet masking."""

    kind = "vem"

    def __init__(self, mesh: PolyMesh, k: int, problem, c_stab: float = 1.0):
        if k not in (1, 2):
            raise ValueError("only k in {1, 2} is supported")
        self.mesh = mesh
        self.k = k
        self.problem = problem
        self.c_stab = c_stab
        self._number_dofs()
        self.ops = [self._build_local_ops(c) for c in range(mesh.n_cells)]
        self._assemble_global()
        self._m_solver = None
        self._edge_cache = {}

    # ------------------------------------------------------------------
    # DoF numbering
    # ------------------------------------------------------------------
    def _number_dofs(self) -> None:
        mesh = self.mesh
        k = self.k
        used = sorted({int(v) for ring in mesh.cells for v in ring})
        self.vertex_dof = {v: i for i, v in enumerate(used)}
        nv = len(used)
        self.n_moments_edge = k - 1
        self.n_moments_cell = poly_dim(k - 2) if k >= 2 else 0
        self.edge_dof_base = nv
        ne = mesh.n_edges
        self.cell_dof_base = nv + self.n_moments_edge * ne
        self.ndofs = self.cell_dof_base + self.n_moments_cell * mesh.n_cells

        boundary = np.zeros(self.ndofs, dtype=bool)
        for v in mesh.boundary_vertices():
            boundary[self.vertex_dof[v]] = True
        if self.n_moments_edge:
            for e in np.nonzero(mesh.edge_is_boundary)[0]:
                base = self.edge_dof_base + self.n_moments_edge * int(e)
                boundary[base:base + self.n_moments_edge] = True
        self.boundary_mask = boundary
        self.interior = ~boundary

    def edge_dofs(self, e: int) -> list[int]:
        base = self.edge_dof_base + self.n_moments_edge * int(e)
        return list(range(base, base + self.n_moments_edge))

    def cell_dofs(self, c: int) -> list[int]:
        """Global DoF indices of cell c in local order."""
        mesh = self.mesh
        ring = mesh.cells[c]
        out = [self.vertex_dof[int(v)] for v in ring]
        for e in mesh.cell_edges[c]:
            out.extend(self.edge_dofs(int(e)))
        base = self.cell_dof_base + self.n_moments_cell * c
        out.extend(range(base, base + self.n_moments_cell))
        return out

    # ------------------------------------------------------------------
    # local operators
    # ------------------------------------------------------------------
    def _edge_trace_matrix(self, xq01: np.ndarray) -> np.ndarray:
        """Trace values at parameters xq01 from (v0, v1[, mean]) edge DoFs."""
        s = xq01
        if self.k == 1:
            return np.stack([1 - s, s], axis=1)
        # quadratic determined by endpoints and mean
        a = np.stack([np.ones_like(s), np.zeros_like(s), np.zeros_like(s)], axis=1)
        b = np.stack([-4 * np.ones_like(s), -2 * np.ones_like(s), 6 * np.ones_like(s)],
                     axis=1) * s[:, None]
        c = np.stack([3 * np.ones_like(s), 3 * np.ones_like(s), -6 * np.ones_like(s)],
                     axis=1) * (s ** 2)[:, None]
        return a + b + c

    def _build_local_ops(self, c: int):
        mesh, k = self.mesh, self.k
        ring = [int(v) for v in mesh.cells[c]]
        nv = len(ring)
        ops = LocalVemOps()
        ops.cell = c
        ops.dofs = np.asarray(self.cell_dofs(c))
        ndof = len(ops.dofs)
        ops.h = float(mesh.h_cell[c])
        ops.area = float(mesh.cell_area[c])
        basis = ScaledMonomialBasis(mesh.cell_centroid(c), ops.h, k)
        basis_km1 = ScaledMonomialBasis(mesh.cell_centroid(c), ops.h, k - 1)
        ops.basis, ops.basis_km1 = basis, basis_km1
        np_k, np_km1 = basis.dim, basis_km1.dim
        quad = mesh.cell_quadrature(c, 2 * k + 2)
        ops.quad = quad
        ops.Phi_k = basis.eval(quad.points)
        ops.Phi_km1 = basis_km1.eval(quad.points)
        ops.Mass_poly = ops.Phi_k.T @ (quad.weights[:, None] * ops.Phi_k)
        ops.Mass_km1 = ops.Phi_km1.T @ (quad.weights[:, None] * ops.Phi_km1)

        # local index helpers
        vert_slice = slice(0, nv)
        edge_base = nv
        cell_base = nv + self.n_moments_edge * nv

        # per-edge Gauss data in cell traversal order
        ng = k + 2
        from .quadrature import gauss_legendre_01
        s01, w01 = gauss_legendre_01(ng)
        edge_pts, edge_w, edge_nrm, edge_trace_cols = [], [], [], []
        trace01 = self._edge_trace_matrix(s01)
        for i in range(nv):
            a, b = ring[i], ring[(i + 1) % nv]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            tang = pb - pa
            ln = np.linalg.norm(tang)
            nrm = np.array([tang[1], -tang[0]]) / ln  # outward for ccw ring
            pts = pa[None, :] + s01[:, None] * tang[None, :]
            edge_pts.append(pts)
            edge_w.append(w01 * ln)
            edge_nrm.append(nrm)
            cols = [i, (i + 1) % nv]
            if k == 2:
                cols.append(edge_base + i)
            edge_trace_cols.append(cols)

        # --- H1 projector -------------------------------------------------
        gq = mesh.cell_quadrature(c, max(0, 2 * k - 2))
        gx_m, gy_m = basis.eval_grad(gq.points)
        G = gx_m.T @ (gq.weights[:, None] * gx_m) + gy_m.T @ (gq.weights[:, None] * gy_m)
        B = np.zeros((np_k, ndof))
        lap = basis.laplacian_matrix()  # (np_{k-2} x np_k)
        for i in range(nv):
            pts, wts, nrm = edge_pts[i], edge_w[i], edge_nrm[i]
            gx_e, gy_e = basis.eval_grad(pts)
            dn = gx_e * nrm[0] + gy_e * nrm[1]          # (ng x np_k)
            contrib = dn.T @ (wts[:, None] * trace01)   # (np_k x ntrace)
            B[:, edge_trace_cols[i]] += contrib
        if k >= 2:
            # -(laplacian m_a, phi_j) = -|E| * sum_b lap[b,a] M_b(phi_j)
            for bidx in range(poly_dim(k - 2)):
                B[:, cell_base + bidx] -= ops.area * lap[bidx, :]
        # constant-mode constraint
        if k == 1:
            per = sum(np.sum(w) for w in edge_w)
            row = np.zeros(ndof)
            for i in range(nv):
                row[edge_trace_cols[i]] += edge_w[i] @ trace01
            G[0, :] = _boundary_means(basis, edge_pts, edge_w)
            B[0, :] = row / per
        else:
            G[0, :] = ops.Mass_poly[0, :] / ops.area
            B[0, :] = 0.0
            B[0, cell_base] = 1.0
        try:
            ops.PiNabla = np.linalg.solve(G, B)
        except np.linalg.LinAlgError as exc:
            raise SingularG(f"cell {c}: singular H1-projector system") from exc

        # --- L2 projectors --------------------------------------------------
        H = np.zeros((np_k, ndof))
        n_low = poly_dim(k - 2)
        for bidx in range(n_low):
            H[bidx, cell_base + bidx] = ops.area
        proj_rows = ops.Mass_poly @ ops.PiNabla
        H[n_low:, :] = proj_rows[n_low:, :]
        ops.Pi0k = np.linalg.solve(ops.Mass_poly, H)
        ops.Pi0km1 = np.linalg.solve(ops.Mass_km1, H[:np_km1, :])

        # --- projected gradient --------------------------------------------
        rhs_x = np.zeros((np_km1, ndof))
        rhs_y = np.zeros((np_km1, ndof))
        if k >= 2:
            # -(phi, dx m_beta)_E = -|E| sum_gamma dx[gamma,beta] M_gamma(phi)
            dx_km1 = basis_km1.derivative_matrix(0)
            dy_km1 = basis_km1.derivative_matrix(1)
            for beta in range(np_km1):
                for gamma in range(poly_dim(k - 2)):
                    rhs_x[beta, cell_base + gamma] -= ops.area * dx_km1[gamma, beta]
                    rhs_y[beta, cell_base + gamma] -= ops.area * dy_km1[gamma, beta]
        for i in range(nv):
            pts, wts, nrm = edge_pts[i], edge_w[i], edge_nrm[i]
            m_vals = basis_km1.eval(pts)  # (ng x np_km1)
            contrib = m_vals.T @ (wts[:, None] * trace01)
            rhs_x[:, edge_trace_cols[i]] += nrm[0] * contrib
            rhs_y[:, edge_trace_cols[i]] += nrm[1] * contrib
        ops.Pi0grad_x = np.linalg.solve(ops.Mass_km1, rhs_x)
        ops.Pi0grad_y = np.linalg.solve(ops.Mass_km1, rhs_y)

        # --- DoFs of monomials ----------------------------------------------
        Dmat = np.zeros((ndof, np_k))
        Dmat[vert_slice, :] = basis.eval(mesh.vertices[ring])
        if k == 2:
            for i in range(nv):
                Dmat[edge_base + i, :] = (edge_w[i] @ basis.eval(edge_pts[i])) \
                    / np.sum(edge_w[i])
            for bidx in range(n_low):
                Dmat[cell_base + bidx, :] = ops.Mass_poly[bidx, :] / ops.area
        ops.Dmat = Dmat
        ops.Q = np.eye(ndof) - Dmat @ ops.Pi0k

        # --- problem coefficients -------------------------------------------
        D_vals = self.problem.diffusion_values(quad.points)   # (nq, 2, 2)
        r_vals = self.problem.reaction_values(quad.points)    # (nq,)
        eigs = np.linalg.eigvalsh(D_vals)
        ops.a_min = float(eigs[:, 0].min())
        ops.a_max = float(eigs[:, -1].max())
        ops.r_min = float(r_vals.min())
        ops.r_max = float(np.abs(r_vals).max())
        ops.sigma = np.sqrt(ops.a_min * ops.a_max) + \
            np.sqrt(max(ops.r_min, 0.0) * ops.r_max) * ops.h ** 2

        # --- discrete forms ---------------------------------------------------
        w = quad.weights
        gxv = ops.Phi_km1 @ ops.Pi0grad_x   # (nq x ndof)
        gyv = ops.Phi_km1 @ ops.Pi0grad_y
        A = gxv.T @ ((w * D_vals[:, 0, 0])[:, None] * gxv) \
            + gxv.T @ ((w * D_vals[:, 0, 1])[:, None] * gyv) \
            + gyv.T @ ((w * D_vals[:, 1, 0])[:, None] * gxv) \
            + gyv.T @ ((w * D_vals[:, 1, 1])[:, None] * gyv)
        if np.any(r_vals):
            vk = ops.Phi_k @ ops.Pi0k
            A += vk.T @ ((w * r_vals)[:, None] * vk)
        A += ops.sigma * (ops.Q.T @ ops.Q)
        M = ops.Pi0k.T @ ops.Mass_poly @ ops.Pi0k + ops.h ** 2 * (ops.Q.T @ ops.Q)
        ops.A_loc = 0.5 * (A + A.T)
        ops.M_loc = 0.5 * (M + M.T)
        return ops

    # ------------------------------------------------------------------
    # global structures
    # ------------------------------------------------------------------
    def _assemble_global(self) -> None:
        rows, cols, a_vals, m_vals = [], [], [], []
        for ops in self.ops:
            d = ops.dofs
            grid = np.meshgrid(d, d, indexing="ij")
            rows.append(grid[0].ravel())
            cols.append(grid[1].ravel())
            a_vals.append(ops.A_loc.ravel())
            m_vals.append(ops.M_loc.ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        shape = (self.ndofs, self.ndofs)
        self.a_mat = sps.coo_matrix((np.concatenate(a_vals), (rows, cols)),
                                    shape=shape).tocsr()
        self.m_mat = sps.coo_matrix((np.concatenate(m_vals), (rows, cols)),
                                    shape=shape).tocsr()

    def mass_solver(self) -> InteriorSolver:
        if self._m_solver is None:
            self._m_solver = InteriorSolver(self.m_mat, self.interior)
        return self._m_solver

    # ------------------------------------------------------------------
    # stacked per-cell workspaces (cells grouped by vertex count)
    # ------------------------------------------------------------------
    @property
    def groups(self) -> list:
        if not hasattr(self, "_groups"):
            by_nd: dict[int, list[int]] = {}
            for c, ops in enumerate(self.ops):
                by_nd.setdefault(len(ops.dofs), []).append(c)
            self._groups = []
            for nd in sorted(by_nd):
                cells = np.asarray(by_nd[nd])
                ops0 = self.ops[cells[0]]
                grp = _CellGroup(
                    cells=cells,
                    dofs=np.stack([self.ops[c].dofs for c in cells]),
                    Pi0k=np.stack([self.ops[c].Pi0k for c in cells]),
                    Pi0gx=np.stack([self.ops[c].Pi0grad_x for c in cells]),
                    Pi0gy=np.stack([self.ops[c].Pi0grad_y for c in cells]),
                    Q=np.stack([self.ops[c].Q for c in cells]),
                    A_loc=np.stack([self.ops[c].A_loc for c in cells]),
                    M_loc=np.stack([self.ops[c].M_loc for c in cells]),
                    Mass_k=np.stack([self.ops[c].Mass_poly for c in cells]),
                    Mass_km1=np.stack([self.ops[c].Mass_km1 for c in cells]),
                    Phi_k=np.stack([self.ops[c].Phi_k for c in cells]),
                    Phi_km1=np.stack([self.ops[c].Phi_km1 for c in cells]),
                    qw=np.stack([self.ops[c].quad.weights for c in cells]),
                    qpts=np.stack([self.ops[c].quad.points for c in cells]),
                    h=np.array([self.ops[c].h for c in cells]),
                )
                del ops0
                self._groups.append(grp)
        return self._groups

    def fine_quad(self, degree: int):
        """Stacked fine quadrature with basis values, keyed by degree."""
        if not hasattr(self, "_fine_quads"):
            self._fine_quads = {}
        if degree not in self._fine_quads:
            out = []
            for grp in self.groups:
                pts, wts, phi, phim = [], [], [], []
                for c in grp.cells:
                    quad = self.mesh.cell_quadrature(int(c), degree)
                    pts.append(quad.points)
                    wts.append(quad.weights)
                    phi.append(self.ops[int(c)].basis.eval(quad.points))
                    phim.append(self.ops[int(c)].basis_km1.eval(quad.points))
                out.append((np.stack(pts), np.stack(wts), np.stack(phi),
                            np.stack(phim)))
            self._fine_quads[degree] = out
        return self._fine_quads[degree]

    @property
    def edge_ws(self):
        """Stacked interior-edge Gauss data with two-sided basis gradients."""
        if not hasattr(self, "_edge_ws"):
            mesh = self.mesh
            from .quadrature import gauss_legendre_01
            ng = self.k + 2
            s01, w01 = gauss_legendre_01(ng)
            interior = np.nonzero(~mesh.edge_is_boundary)[0]
            ne = len(interior)
            np_k = poly_dim(self.k)
            pts = np.empty((ne, ng, 2))
            wts = np.empty((ne, ng))
            normals = np.empty((ne, 2))
            gxL = np.empty((ne, ng, np_k)); gyL = np.empty((ne, ng, np_k))
            gxR = np.empty((ne, ng, np_k)); gyR = np.empty((ne, ng, np_k))
            for i, e in enumerate(interior):
                a, b = mesh.vertices[mesh.edge_vertices[e]]
                tang = b - a
                ln = np.linalg.norm(tang)
                pts[i] = a[None, :] + s01[:, None] * tang[None, :]
                wts[i] = w01 * ln
                normals[i] = np.array([tang[1], -tang[0]]) / ln
                le, ri = int(mesh.edge_left[e]), int(mesh.edge_right[e])
                gxL[i], gyL[i] = self.ops[le].basis.eval_grad(pts[i])
                gxR[i], gyR[i] = self.ops[ri].basis.eval_grad(pts[i])
            self._edge_ws = _EdgeWorkspace(
                edges=interior, eL=mesh.edge_left[interior].astype(int),
                eR=mesh.edge_right[interior].astype(int), pts=pts, wts=wts,
                normals=normals, gxL=gxL, gyL=gyL, gxR=gxR, gyR=gyR,
                h=mesh.h_edge[interior],
                D=self.problem.diffusion_values(pts.reshape(-1, 2))
                .reshape(ne, ng, 2, 2))
        return self._edge_ws

    def edge_jump_sq(self, pp: PiecewisePolynomial) -> np.ndarray:
        """Integral of the flux jump squared per interior edge (stacked)."""
        ws = self.edge_ws
        jump = self.edge_jump_values(pp)
        out = np.zeros(self.mesh.n_edges)
        out[ws.edges] = np.einsum("eg,eg->e", ws.wts, jump ** 2)
        return out

    def edge_jump_values(self, pp: PiecewisePolynomial) -> np.ndarray:
        ws = self.edge_ws
        cL = pp.coeffs[ws.eL]
        cR = pp.coeffs[ws.eR]
        dgx = np.einsum("egp,ep->eg", ws.gxL, cL) - np.einsum("egp,ep->eg", ws.gxR, cR)
        dgy = np.einsum("egp,ep->eg", ws.gyL, cL) - np.einsum("egp,ep->eg", ws.gyR, cR)
        fx = ws.D[..., 0, 0] * dgx + ws.D[..., 0, 1] * dgy
        fy = ws.D[..., 1, 0] * dgx + ws.D[..., 1, 1] * dgy
        return fx * ws.normals[:, None, 0] + fy * ws.normals[:, None, 1]

    def broken_sq_norm_percell(self, pp: PiecewisePolynomial) -> np.ndarray:
        """Per-cell integral of a broken polynomial squared."""
        out = np.empty(self.mesh.n_cells)
        for grp in self.groups:
            mass = grp.Mass_k if pp.degree == self.k else grp.Mass_km1
            c = pp.coeffs[grp.cells]
            out[grp.cells] = np.einsum("gi,gij,gj->g", c, mass, c)
        return out

    def slot_m_norms(self, values: np.ndarray) -> np.ndarray:
        """Per-cell m_h-norm of the (I - Pi0k) slot."""
        out = np.empty(self.mesh.n_cells)
        for grp in self.groups:
            w = np.einsum("gij,gj->gi", grp.Q, values[grp.dofs])
            out[grp.cells] = np.maximum(
                np.einsum("gi,gij,gj->g", w, grp.M_loc, w), 0.0)
        return np.sqrt(out)

    def slot_a_norms(self, values: np.ndarray) -> np.ndarray:
        out = np.empty(self.mesh.n_cells)
        for grp in self.groups:
            w = np.einsum("gij,gj->gi", grp.Q, values[grp.dofs])
            out[grp.cells] = np.maximum(
                np.einsum("gi,gij,gj->g", w, grp.A_loc, w), 0.0)
        return np.sqrt(out)

    # ------------------------------------------------------------------
    # interpolation and projections
    # ------------------------------------------------------------------
    def interpolate(self, f, zero_boundary: bool = True) -> DiscreteFunction:
        """DoFs of f: vertex values, edge means and cell moments."""
        mesh, k = self.mesh, self.k
        vals = np.zeros(self.ndofs)
        used = sorted(self.vertex_dof)
        pts = mesh.vertices[used]
        vals[[self.vertex_dof[v] for v in used]] = f(pts)
        if self.n_moments_edge:
            for e in range(mesh.n_edges):
                a, b = mesh.vertices[mesh.edge_vertices[e]]
                rule = edge_quadrature(a, b, 2 * k + 2)
                vals[self.edge_dofs(e)[0]] = rule.integrate(f(rule.points)) \
                    / float(mesh.h_edge[e])
        if self.n_moments_cell:
            for c in range(mesh.n_cells):
                ops = self.ops[c]
                fq = np.asarray(f(ops.quad.points))
                base = self.cell_dof_base + self.n_moments_cell * c
                for bidx in range(self.n_moments_cell):
                    vals[base + bidx] = float(
                        ops.quad.weights @ (fq * ops.Phi_k[:, bidx])) / ops.area
        if zero_boundary:
            vals[self.boundary_mask] = 0.0
        return DiscreteFunction(self, vals)

    def project_k(self, u: DiscreteFunction) -> PiecewisePolynomial:
        """Elementwise L2 projection onto P_k as a broken polynomial field."""
        out = PiecewisePolynomial(self.mesh, self.k)
        for grp in self.groups:
            out.coeffs[grp.cells] = np.einsum("gij,gj->gi", grp.Pi0k,
                                              u.values[grp.dofs])
        return out

    def project_gradient(self, u: DiscreteFunction):
        """Componentwise projected gradient as two broken P_{k-1} fields."""
        gx = PiecewisePolynomial(self.mesh, self.k - 1)
        gy = PiecewisePolynomial(self.mesh, self.k - 1)
        for grp in self.groups:
            loc = u.values[grp.dofs]
            gx.coeffs[grp.cells] = np.einsum("gij,gj->gi", grp.Pi0gx, loc)
            gy.coeffs[grp.cells] = np.einsum("gij,gj->gi", grp.Pi0gy, loc)
        return gx, gy

    def project_data(self, f_callable) -> PiecewisePolynomial:
        """Broken P_k projection of pointwise data (the forcing projector)."""
        out = PiecewisePolynomial(self.mesh, self.k)
        for grp, (pts, wts, phi, _) in zip(self.groups,
                                           self.fine_quad(2 * self.k + 8)):
            vals = np.asarray(f_callable(pts.reshape(-1, 2))) \
                .reshape(pts.shape[:2])
            mass = np.einsum("gqi,gq,gqj->gij", phi, wts, phi)
            rhs = np.einsum("gqi,gq->gi", phi, wts * vals)
            out.coeffs[grp.cells] = np.linalg.solve(mass, rhs[..., None])[..., 0]
        return out

    # ------------------------------------------------------------------
    # discrete operators
    # ------------------------------------------------------------------
    def data_pairing(self, g) -> np.ndarray:
        """Assembled vector of the computable pairing (g, Pi0_k phi_j).

        g may be a PiecewisePolynomial on this mesh or a pointwise callable.
        """
        rhs = np.zeros(self.ndofs)
        if isinstance(g, PiecewisePolynomial):
            if g.mesh is not self.mesh or g.degree > self.k:
                raise InternalError("data_pairing: incompatible broken polynomial")
            emb = None
            if g.degree < self.k:
                emb = ScaledMonomialBasis(np.zeros(2), 1.0, g.degree) \
                    .embed_matrix(self.k)
            for grp in self.groups:
                coeffs = g.coeffs[grp.cells]
                if emb is not None:
                    coeffs = coeffs @ emb.T
                loc = np.einsum("gji,gjl,gl->gi", grp.Pi0k, grp.Mass_k, coeffs)
                np.add.at(rhs, grp.dofs.ravel(), loc.ravel())
        else:
            for grp in self.groups:
                gq = np.asarray(g(grp.qpts.reshape(-1, 2))) \
                    .reshape(grp.qpts.shape[:2])
                mom = np.einsum("gqj,gq->gj", grp.Phi_k, grp.qw * gq)
                loc = np.einsum("gji,gj->gi", grp.Pi0k, mom)
                np.add.at(rhs, grp.dofs.ravel(), loc.ravel())
        return rhs

    def l2_recon(self, g) -> DiscreteFunction:
        """Solve m_h(w, phi) = (g, phi) for w with zero boundary values."""
        rhs = self.data_pairing(g)
        return DiscreteFunction(self, self.mass_solver().solve_full(rhs))

    def discrete_laplacian(self, v: DiscreteFunction) -> DiscreteFunction:
        """L_h v from -m_h(L_h v, phi) = A_h(v, phi) on interior DoFs."""
        rhs = -(self.a_mat @ v.values)
        return DiscreteFunction(self, self.mass_solver().solve_full(rhs))

    # ------------------------------------------------------------------
    # inconsistency indicators
    # ------------------------------------------------------------------
    def inconsistency_l2(self, v: DiscreteFunction) -> np.ndarray:
        """Per-cell Psi_{L2,E} v."""
        return np.sqrt(1.0 + self.c_stab) * self.slot_m_norms(v.values)

    def inconsistency_energy(self, v: DiscreteFunction) -> np.ndarray:
        """Per-cell Psi_{A,E} v (three-term computable bound)."""
        c_pf = self.problem.c_pf
        out = np.empty(self.mesh.n_cells)
        slot_a = self.slot_a_norms(v.values) ** 2
        for grp in self.groups:
            loc = v.values[grp.dofs]
            pts = grp.qpts.reshape(-1, 2)
            D_vals = self.problem.diffusion_values(pts).reshape(
                *grp.qpts.shape[:2], 2, 2)
            gx = np.einsum("gqp,gp->gq", grp.Phi_km1,
                           np.einsum("gij,gj->gi", grp.Pi0gx, loc))
            gy = np.einsum("gqp,gp->gq", grp.Phi_km1,
                           np.einsum("gij,gj->gi", grp.Pi0gy, loc))
            flux_x = D_vals[..., 0, 0] * gx + D_vals[..., 0, 1] * gy
            flux_y = D_vals[..., 1, 0] * gx + D_vals[..., 1, 1] * gy
            term1 = _batch_proj_residual_sq(grp.Phi_km1, grp.Mass_km1, grp.qw,
                                            flux_x) + \
                _batch_proj_residual_sq(grp.Phi_km1, grp.Mass_km1, grp.qw, flux_y)
            r_vals = self.problem.reaction_values(pts).reshape(grp.qpts.shape[:2])
            if np.any(r_vals):
                vk = np.einsum("gqp,gp->gq", grp.Phi_k,
                               np.einsum("gij,gj->gi", grp.Pi0k, loc))
                term2 = _batch_proj_residual_sq(grp.Phi_k, grp.Mass_k, grp.qw,
                                                r_vals * vk)
            else:
                term2 = 0.0
            a_min = np.array([self.ops[int(c)].a_min for c in grp.cells])
            a_max = np.array([self.ops[int(c)].a_max for c in grp.cells])
            c_a = 1.0 + self.c_stab * np.sqrt(
                0.5 + 0.5 * (a_max / a_min) ** 2 + (1.0 / a_min) ** 2 + c_pf ** 2)
            out[grp.cells] = np.sqrt(
                c_a * (term1 + term2 + slot_a[grp.cells]))
        return out


def _proj_residual_sq(phi: np.ndarray, mass: np.ndarray, w: np.ndarray,
                      values: np.ndarray) -> float:
    """|| (I - Pi) g ||^2 for pointwise values g at the cell quadrature."""
    rhs = phi.T @ (w * values)
    coeffs = np.linalg.solve(mass, rhs)
    resid = values - phi @ coeffs
    return float(w @ resid ** 2)


def _batch_proj_residual_sq(phi, mass, w, values) -> np.ndarray:
    """Batched || (I - Pi) g ||^2 per cell for stacked groups."""
    rhs = np.einsum("gqi,gq->gi", phi, w * values)
    coeffs = np.linalg.solve(mass, rhs[..., None])[..., 0]
    resid = values - np.einsum("gqi,gi->gq", phi, coeffs)
    return np.maximum(np.einsum("gq,gq->g", w, resid ** 2), 0.0)


@dataclass
class _CellGroup:
    cells: np.ndarray
    dofs: np.ndarray
    Pi0k: np.ndarray
    Pi0gx: np.ndarray
    Pi0gy: np.ndarray
    Q: np.ndarray
    A_loc: np.ndarray
    M_loc: np.ndarray
    Mass_k: np.ndarray
    Mass_km1: np.ndarray
    Phi_k: np.ndarray
    Phi_km1: np.ndarray
    qw: np.ndarray
    qpts: np.ndarray
    h: np.ndarray


@dataclass
class _EdgeWorkspace:
    edges: np.ndarray
    eL: np.ndarray
    eR: np.ndarray
    pts: np.ndarray
    wts: np.ndarray
    normals: np.ndarray
    gxL: np.ndarray
    gyL: np.ndarray
    gxR: np.ndarray
    gyR: np.ndarray
    h: np.ndarray
    D: np.ndarray


def _boundary_means(basis: ScaledMonomialBasis, edge_pts, edge_w) -> np.ndarray:
    total = sum(np.sum(w) for w in edge_w)
    acc = np.zeros(basis.dim)
    for pts, w in zip(edge_pts, edge_w):
        acc += w @ basis.eval(pts)
    return acc / total
