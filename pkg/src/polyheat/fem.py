"""Conforming bilinear FEM on a time-warped quadrilateral mesh.

The discrete forms are consistent (plain Gauss quadrature), so every
inconsistency indicator of the abstract framework vanishes and the global
mesh-modification estimator applies with the elliptic transfer operator.
"""

import numpy as np
import scipy.sparse as sps

from .discrete import DiscreteFunction, InteriorSolver
from .errors import FoldedElement, InternalError
from .mesh import PolyMesh
from .quadrature import gauss_legendre_01

_GAUSS_1D = 3  # 3x3 tensor rule per cell: exact Q1 forms on affine cells


def _ref_rule():
    x, w = gauss_legendre_01(_GAUSS_1D)
    xi, eta = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([xi.ravel(), eta.ravel()], axis=1)
    wts = np.outer(w, w).ravel()
    return pts, wts


def _shape(ref: np.ndarray) -> np.ndarray:
    xi, eta = ref[:, 0], ref[:, 1]
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta),
                     xi * eta, (1 - xi) * eta], axis=1)


def _shape_grad(ref: np.ndarray) -> np.ndarray:
    xi, eta = ref[:, 0], ref[:, 1]
    out = np.empty((len(ref), 4, 2))
    out[:, 0, 0] = -(1 - eta); out[:, 0, 1] = -(1 - xi)
    out[:, 1, 0] = (1 - eta);  out[:, 1, 1] = -xi
    out[:, 2, 0] = eta;        out[:, 2, 1] = xi
    out[:, 3, 0] = -eta;       out[:, 3, 1] = (1 - xi)
    return out


_D2N_CROSS = np.array([1.0, -1.0, 1.0, -1.0])  # d2 N / dxi deta


class MovingMeshMap:
    """Time-dependent warp of the unit square driving the moving mesh."""

    def __init__(self, n: int, warp, amplitude: float = 0.5):
        self.n = int(n)
        self.warp = warp
        self.amplitude = amplitude
        xs = np.linspace(0.0, 1.0, n + 1)
        xi, eta = np.meshgrid(xs, xs, indexing="ij")
        self.ref_nodes = np.stack([xi.ravel(), eta.ravel()], axis=1)

    def node_positions(self, t: float) -> np.ndarray:
        return self.warp(self.ref_nodes, t)

    def check_boundary_preserved(self, t: float, samples: int = 200) -> bool:
        s = np.linspace(0, 1, samples)
        z = np.zeros_like(s)
        o = np.ones_like(s)
        for ref in (np.stack([s, z], 1), np.stack([s, o], 1),
                    np.stack([z, s], 1), np.stack([o, s], 1)):
            img = self.warp(ref, t)
            d = np.minimum.reduce([np.abs(img[:, 0]), np.abs(1 - img[:, 0]),
                                   np.abs(img[:, 1]), np.abs(1 - img[:, 1])])
            if np.max(d) > 1e-12:
                return False
        return True


def identity_warp(ref: np.ndarray, t: float) -> np.ndarray:
    return ref.copy()


def radial_compression_warp(r_layer_fn, amplitude: float = 0.5,
                            delta_fn=lambda t: 0.2):
    """Warp compressing the radial coordinate around a moving layer radius.

    rho(r) = r - a(t) * sin(pi * clamp((r - r_layer)/delta, -1, 1)) * s(r)
    with a = amplitude * delta / pi and a linear taper s(r) = min(1, r/r_layer)
    keeping the origin fixed.  The radial stretch stays strictly positive for
    amplitude * (1 + delta/(pi*r_layer)) < 1, so the map is a bijection of the
    square; points beyond r_layer + delta (in particular the far boundary) do
    not move and the two near boundary edges slide along themselves.
    """

    def warp(ref: np.ndarray, t: float) -> np.ndarray:
        r_layer = r_layer_fn(t)
        delta = delta_fn(t)
        a_coef = amplitude * delta / np.pi
        r = np.sqrt(ref[:, 0] ** 2 + ref[:, 1] ** 2)
        u = np.clip((r - r_layer) / delta, -1.0, 1.0)
        taper = np.clip(r / r_layer, 0.0, 1.0)
        rho = r - a_coef * np.sin(np.pi * u) * taper
        scale = np.where(r > 0, rho / np.maximum(r, 1e-300), 1.0)
        return ref * scale[:, None]

    return warp


def hat_benchmark_warp(amplitude: float = 0.5, r0: float = 0.15):
    """Default warp for the expanding-hat benchmark.

    The band is centred on the solution's maximum-gradient circle r = r0 and
    widens with the layer (width ~ 1/sqrt(m(t)) for m(t) = 100/(3t+2)).
    """

    def delta_fn(t):
        return min(0.2 * np.sqrt((3 * t + 2) / 2.0), 0.3)

    return radial_compression_warp(lambda t: r0, amplitude=amplitude,
                                   delta_fn=delta_fn)


def warp_mesh(mmap: MovingMeshMap, t: float) -> PolyMesh:
    """Warped-quad mesh at time t; raises FoldedElement on folded cells."""
    n = mmap.n
    coords = mmap.node_positions(t)
    vid = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)
    cells = []
    for j in range(n):
        for i in range(n):
            cells.append((vid[i, j], vid[i + 1, j], vid[i + 1, j + 1], vid[i, j + 1]))
    ref, _ = _ref_rule()
    dN = _shape_grad(ref)
    nodes = coords[np.asarray(cells)]
    jac = np.einsum("qaj,cai->cqij", dN, nodes)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(det <= 0):
        raise FoldedElement(f"warp at t={t} folds {int((det <= 0).any(axis=1).sum())} cells")
    return PolyMesh(coords, cells, forest=None, generation=0)


class FemSpace:
    """Q1 space on a warped quad mesh with consistent mass/stiffness forms."""

    kind = "fem"
    k = 1

    def __init__(self, mesh: PolyMesh, problem):
        self.mesh = mesh
        self.problem = problem
        self.ndofs = mesh.n_vertices
        self.cells_arr = np.asarray([list(map(int, r)) for r in mesh.cells])
        if self.cells_arr.shape[1] != 4:
            raise InternalError("FEM backend requires a pure quad mesh")
        boundary = np.zeros(self.ndofs, dtype=bool)
        for v in mesh.boundary_vertices():
            boundary[v] = True
        self.boundary_mask = boundary
        self.interior = ~boundary
        self._precompute()
        self._assemble()
        self._m_solver = None
        self._a_solver = None

    # -- geometry -----------------------------------------------------------
    def _precompute(self) -> None:
        ref, wref = _ref_rule()
        self.ref = ref
        self.N = _shape(ref)                      # (q, 4)
        self.dN = _shape_grad(ref)                # (q, 4, 2)
        nodes = self.mesh.vertices[self.cells_arr]   # (c, 4, 2)
        self.nodes = nodes
        jac = np.einsum("qaj,cai->cqij", self.dN, nodes)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        if np.any(det <= 0):
            raise FoldedElement("mesh contains folded cells")
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1] / det
        inv[..., 0, 1] = -jac[..., 0, 1] / det
        inv[..., 1, 0] = -jac[..., 1, 0] / det
        inv[..., 1, 1] = jac[..., 0, 0] / det
        self.jinv = inv                            # d xi_a / d x_i
        self.detj = det
        self.xq = np.einsum("qa,cai->cqi", self.N, nodes)
        self.wq = wref[None, :] * det
        self.gradN = np.einsum("qaj,cqji->cqai", self.dN, inv)
        self.cross = np.einsum("a,cai->ci", _D2N_CROSS, nodes)  # x_{,xi eta}

    def _assemble(self) -> None:
        pts = self.xq.reshape(-1, 2)
        D = self.problem.diffusion_values(pts).reshape(*self.xq.shape[:2], 2, 2)
        r = self.problem.reaction_values(pts).reshape(self.xq.shape[:2])
        w = self.wq
        flux = np.einsum("cqij,cqaj->cqai", D, self.gradN)
        a_loc = np.einsum("cq,cqai,cqbi->cab", w, flux, self.gradN)
        a_loc += np.einsum("cq,qa,qb->cab", w * r, self.N, self.N)
        m_loc = np.einsum("cq,qa,qb->cab", w, self.N, self.N)
        rows = np.repeat(self.cells_arr, 4, axis=1).ravel()
        cols = np.tile(self.cells_arr, (1, 4)).ravel()
        shape = (self.ndofs, self.ndofs)
        self.a_mat = sps.coo_matrix((a_loc.ravel(), (rows, cols)), shape=shape).tocsr()
        self.m_mat = sps.coo_matrix((m_loc.ravel(), (rows, cols)), shape=shape).tocsr()

    def mass_solver(self) -> InteriorSolver:
        if self._m_solver is None:
            self._m_solver = InteriorSolver(self.m_mat, self.interior)
        return self._m_solver

    def stiffness_solver(self) -> InteriorSolver:
        if self._a_solver is None:
            self._a_solver = InteriorSolver(self.a_mat, self.interior)
        return self._a_solver

    # -- interface shared with the VEM space --------------------------------
    def interpolate(self, f, zero_boundary: bool = True) -> DiscreteFunction:
        vals = np.asarray(f(self.mesh.vertices), dtype=float)
        if zero_boundary:
            vals = vals.copy()
            vals[self.boundary_mask] = 0.0
        return DiscreteFunction(self, vals)

    def project_data(self, f_callable):
        """The data projector is the identity here: keep the callable."""
        return f_callable

    def data_pairing(self, g) -> np.ndarray:
        if isinstance(g, DiscreteFunction):
            return self.m_mat @ g.values
        gq = np.asarray(g(self.xq.reshape(-1, 2))).reshape(self.xq.shape[:2])
        cell_rhs = np.einsum("cq,qa->ca", self.wq * gq, self.N)
        out = np.zeros(self.ndofs)
        np.add.at(out, self.cells_arr.ravel(), cell_rhs.ravel())
        return out

    def l2_recon(self, g) -> DiscreteFunction:
        rhs = self.data_pairing(g)
        return DiscreteFunction(self, self.mass_solver().solve_full(rhs))

    def discrete_laplacian(self, v: DiscreteFunction) -> DiscreteFunction:
        rhs = -(self.a_mat @ v.values)
        return DiscreteFunction(self, self.mass_solver().solve_full(rhs))

    # -- field evaluation ----------------------------------------------------
    @property
    def xq_flat(self) -> np.ndarray:
        if not hasattr(self, "_xq_flat"):
            self._xq_flat = self.xq.reshape(-1, 2)
        return self._xq_flat

    @property
    def xq_hints(self) -> np.ndarray:
        if not hasattr(self, "_xq_hints"):
            self._xq_hints = np.repeat(np.arange(self.mesh.n_cells),
                                       self.xq.shape[1])
        return self._xq_hints

    @property
    def jump_ws(self):
        """Stacked interior-edge Gauss data with two-sided physical gradients."""
        if not hasattr(self, "_jump_ws"):
            mesh = self.mesh
            s01, w01 = gauss_legendre_01(3)
            interior = np.nonzero(~mesh.edge_is_boundary)[0]
            ne, ng = len(interior), len(s01)
            cL = mesh.edge_left[interior].astype(int)
            cR = mesh.edge_right[interior].astype(int)

            # local edge index of each edge within its two cells
            edge_pos = np.empty((mesh.n_edges, 2), dtype=int)
            for c, edges in enumerate(mesh.cell_edges):
                for pos, e in enumerate(edges):
                    side = 0 if mesh.edge_left[e] == c else 1
                    edge_pos[int(e), side] = pos
            localL = edge_pos[interior, 0]
            localR = edge_pos[interior, 1]

            av = mesh.vertices[mesh.edge_vertices[interior, 0]]
            bv = mesh.vertices[mesh.edge_vertices[interior, 1]]
            tang = bv - av
            ln = np.linalg.norm(tang, axis=1)
            wts = np.outer(ln, w01)
            normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / ln[:, None]
            pts_all = av[:, None, :] + s01[None, :, None] * tang[:, None, :]

            def ref_coords(local, s):
                z, o = np.zeros_like(s), np.ones_like(s)
                return [np.stack([s, z], 1), np.stack([o, s], 1),
                        np.stack([1 - s, o], 1), np.stack([z, 1 - s], 1)][local]

            def side_grads(cells, locals_, spar):
                out = np.empty((ne, ng, 4, 2))
                for local in range(4):
                    sel = np.nonzero(locals_ == local)[0]
                    if not len(sel):
                        continue
                    dN = _shape_grad(ref_coords(local, spar))     # (ng, 4, 2)
                    J = np.einsum("gaj,eai->egij", dN, self.nodes[cells[sel]])
                    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
                    inv = np.empty_like(J)
                    inv[..., 0, 0] = J[..., 1, 1] / det
                    inv[..., 0, 1] = -J[..., 0, 1] / det
                    inv[..., 1, 0] = -J[..., 1, 0] / det
                    inv[..., 1, 1] = J[..., 0, 0] / det
                    out[sel] = np.einsum("gaj,egji->egai", dN, inv)
                return out

            gradL = side_grads(cL, localL, s01)
            gradR = side_grads(cR, localR, 1 - s01)
            D = self.problem.diffusion_values(pts_all.reshape(-1, 2)) \
                .reshape(ne, ng, 2, 2)
            self._jump_ws = dict(edges=interior, cL=cL, cR=cR, wts=wts,
                                 normals=normals, gradL=gradL, gradR=gradR, D=D)
        return self._jump_ws

    def jump_sq_per_edge(self, w: DiscreteFunction) -> np.ndarray:
        """Integral of the flux jump squared per edge (zero on the boundary)."""
        ws = self.jump_ws
        uL = w.values[self.cells_arr[ws["cL"]]]
        uR = w.values[self.cells_arr[ws["cR"]]]
        dgrad = np.einsum("egai,ea->egi", ws["gradL"], uL) \
            - np.einsum("egai,ea->egi", ws["gradR"], uR)
        flux = np.einsum("egij,egj->egi", ws["D"], dgrad)
        jump = np.einsum("egi,ei->eg", flux, ws["normals"])
        out = np.zeros(self.mesh.n_edges)
        out[ws["edges"]] = np.einsum("eg,eg->e", ws["wts"], jump ** 2)
        return out

    def values_at_quad(self, u: DiscreteFunction) -> np.ndarray:
        return np.einsum("qa,ca->cq", self.N, u.values[self.cells_arr])

    def grads_at_quad(self, u: DiscreteFunction) -> np.ndarray:
        return np.einsum("cqai,ca->cqi", self.gradN, u.values[self.cells_arr])

    def laplacian_at_quad(self, u: DiscreteFunction) -> np.ndarray:
        """Physical Laplacian of the isoparametric Q1 field at quad points."""
        hess = self.hessian_at_quad(u)
        return hess[..., 0, 0] + hess[..., 1, 1]

    def hessian_at_quad(self, u: DiscreteFunction) -> np.ndarray:
        uc = u.values[self.cells_arr]                      # (c, 4)
        u_xieta = uc @ _D2N_CROSS                          # (c,)
        jinv = self.jinv                                   # (c, q, 2, 2)
        sym = np.einsum("cqi,cqj->cqij", jinv[..., 0, :], jinv[..., 1, :]) \
            + np.einsum("cqi,cqj->cqij", jinv[..., 1, :], jinv[..., 0, :])
        term1 = u_xieta[:, None, None, None] * sym
        # sum_a xi_{a,ij} u^ref_a = -(cross . Jinv^T du_ref) * sym_ij
        du_ref = np.einsum("qaj,ca->cqj", self.dN, uc)     # (c, q, 2)
        s = np.einsum("cqak,cqa->cqk", jinv, du_ref)
        s = np.einsum("cqk,ck->cq", s, self.cross)
        return term1 - s[..., None, None] * sym

    def locate(self, pts: np.ndarray, hints: np.ndarray | None = None):
        """Per-point (cell, ref-coord) via bilinear Newton inversion.

        Results are memoized per points-array object: the estimator terms of
        one step all evaluate the previous space at the same quad points.
        """
        key = (id(pts), pts.shape)
        if not hasattr(self, "_locate_memo"):
            self._locate_memo = {}
        if key in self._locate_memo:
            return self._locate_memo[key]
        out = self._locate_impl(pts, hints)
        if len(self._locate_memo) > 8:
            self._locate_memo.clear()
        self._locate_memo[key] = out
        return out

    def _locate_impl(self, pts: np.ndarray, hints: np.ndarray | None):
        n = len(pts)
        cells = np.full(n, -1, dtype=int)
        refs = np.zeros((n, 2))
        if hints is None:
            hints = np.zeros(n, dtype=int)
        ok = self._try_cells(pts, hints, refs)
        cells[ok] = hints[ok]
        missing = np.nonzero(~ok)[0]
        if len(missing):
            neighbors = self._vertex_neighbors()
            cents = np.array([self.mesh.cell_centroid(c)
                              for c in range(self.mesh.n_cells)])
            for i in missing:
                cands = list(neighbors[hints[i]])
                order = np.argsort(np.linalg.norm(cents - pts[i], axis=1))[:12]
                cands.extend(int(c) for c in order)
                for c in cands:
                    ref = self._invert_cell(pts[i], c)
                    if ref is not None:
                        cells[i] = c
                        refs[i] = ref
                        break
                else:
                    raise InternalError(f"point {pts[i]} not located in mesh")
        return cells, refs

    def _vertex_neighbors(self):
        if not hasattr(self, "_vn"):
            by_vertex: dict[int, set] = {}
            for c, ring in enumerate(self.cells_arr):
                for v in ring:
                    by_vertex.setdefault(int(v), set()).add(c)
            self._vn = [sorted(set().union(*[by_vertex[int(v)] for v in ring]))
                        for ring in self.cells_arr]
        return self._vn

    def _try_cells(self, pts, cells, refs_out) -> np.ndarray:
        nodes = self.nodes[cells]
        ref = np.full((len(pts), 2), 0.5)
        for _ in range(12):
            N = _shape(ref)
            x = np.einsum("pa,pai->pi", N, nodes)
            res = x - pts
            if np.max(np.abs(res)) < 1e-13:
                break
            dN = _shape_grad(ref)
            J = np.einsum("paj,pai->pij", dN, nodes)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            dxi = (J[:, 1, 1] * res[:, 0] - J[:, 0, 1] * res[:, 1]) / det
            deta = (-J[:, 1, 0] * res[:, 0] + J[:, 0, 0] * res[:, 1]) / det
            ref = ref - np.stack([dxi, deta], axis=1)
        N = _shape(np.clip(ref, 0, 1))
        x = np.einsum("pa,pai->pi", N, nodes)
        tol = 1e-9
        ok = (ref[:, 0] > -tol) & (ref[:, 0] < 1 + tol) & \
             (ref[:, 1] > -tol) & (ref[:, 1] < 1 + tol) & \
             (np.linalg.norm(x - pts, axis=1) < 1e-9)
        refs_out[ok] = np.clip(ref[ok], 0.0, 1.0)
        return ok

    def _invert_cell(self, pt, c):
        refs = np.zeros((1, 2))
        ok = self._try_cells(pt[None, :], np.array([c]), refs)
        return refs[0] if ok[0] else None

    def eval_at(self, u: DiscreteFunction, pts: np.ndarray,
                hints: np.ndarray | None = None) -> np.ndarray:
        cells, refs = self.locate(pts, hints)
        N = _shape(refs)
        return np.einsum("pa,pa->p", N, u.values[self.cells_arr[cells]])

    def field_at(self, pts: np.ndarray, parts, hints=None) -> np.ndarray:
        """Evaluate a combination of DiscreteFunctions and callables at pts."""
        cells, refs = self.locate(pts, hints)
        N = _shape(refs)
        out = np.zeros(len(pts))
        for coef, item in parts:
            if isinstance(item, DiscreteFunction):
                out += coef * np.einsum("pa,pa->p", N,
                                        item.values[self.cells_arr[cells]])
            else:
                out += coef * np.asarray(item(pts))
        return out


def fem_elliptic_transfer(old_space: FemSpace, new_space: FemSpace,
                          v: DiscreteFunction, problem, t_prev: float,
                          boundary_values: np.ndarray | None = None) -> DiscreteFunction:
    """Transfer by projecting the elliptic reconstruction onto the new space.

    Solves A_new(Tv, phi) = -(g, phi) with
    g = L_h^old v + (P_old - I) f_prev - (P_new - I) f_prev
      = L_h^old v + P_old f_prev - P_new f_prev   (the raw data cancels).
    Reduces to the identity when the meshes coincide.
    """
    f_prev = problem.forcing_at(t_prev)
    lh_old = old_space.discrete_laplacian(v)
    p_old = old_space.l2_recon(f_prev)
    p_new = new_space.l2_recon(f_prev)
    pts = new_space.xq_flat
    hints = new_space.xq_hints
    g_old = old_space.field_at(pts, [(1.0, lh_old), (1.0, p_old)], hints=hints)
    g = g_old - new_space.values_at_quad(p_new).ravel()
    gq = g.reshape(new_space.xq.shape[:2])
    rhs = np.zeros(new_space.ndofs)
    cell_rhs = np.einsum("cq,qa->ca", new_space.wq * gq, new_space.N)
    np.add.at(rhs, new_space.cells_arr.ravel(), -cell_rhs.ravel())
    if boundary_values is None:
        bv = np.zeros(new_space.ndofs)  # same topology: copy the old trace
        bv[new_space.boundary_mask] = v.values[new_space.boundary_mask]
    else:
        bv = boundary_values
    out = new_space.stiffness_solver().solve_full(rhs, bv)
    return DiscreteFunction(new_space, out)
