"""Computable a posteriori estimator terms, accumulations and totals.

Terms follow the elliptic-reconstruction framework: per-step elliptic
estimators (hat-weighted in time), space/time/mesh-transfer/data terms
(piecewise constant per step), exponentially weighted accumulations and the
two final error estimators.  All analysis constants default to 1.
"""

from dataclasses import dataclass, field

import numpy as np

from .crossmesh import (fcc_cell_index, overlay_l2_diff_sq, segment_rule,
                        skeleton_soup)
from .discrete import DiscreteFunction
from .errors import NoExactSolution
from .quadrature import PiecewisePolynomial, gauss_legendre_01


@dataclass
class EstimatorConstants:
    """Estimator configuration: analysis constants set to 1, configurable."""

    c_ell: float = 1.0
    c_stab: float = 1.0
    c_data: float = 1.0
    lam: float = 0.95


@dataclass
class EstimatorBreakdown:
    """Per-step values of the estimator terms plus marking indicators."""

    n: int
    t: float
    tau: float
    eta_ellip_l2: float
    eta_ellip_h1: float
    eta_space: float = 0.0
    eta_time: float = 0.0
    eta_mesh: float = 0.0
    theta_s: float = 0.0
    theta_t_samples: tuple = ()      # (gauss weights, values) over the interval
    cell_indicators: np.ndarray | None = None

    @property
    def theta_t_linf(self) -> float:
        return max(self.theta_t_samples[1]) if self.theta_t_samples else 0.0


# ---------------------------------------------------------------------------
# residual fields
# ---------------------------------------------------------------------------

def _apply_operator_to_poly(problem, pp: PiecewisePolynomial) -> PiecewisePolynomial:
    """Cellwise L p = div(D grad p) - r p for constant-coefficient operators."""
    if problem.diffusion_const is None:
        raise NotImplementedError(
            "residual fields require constant diffusion; project otherwise")
    D = problem.diffusion_const
    out = PiecewisePolynomial(pp.mesh, pp.degree)
    if pp.degree >= 2:
        # the scaled-monomial derivative matrices only depend on the cell
        # through the 1/h factors, so the Hessian contraction is shared
        from .quadrature import ScaledMonomialBasis
        unit = ScaledMonomialBasis(np.zeros(2), 1.0, pp.degree)
        unit_lo = ScaledMonomialBasis(np.zeros(2), 1.0, pp.degree - 1)
        dx, dy = unit.derivative_matrix(0), unit.derivative_matrix(1)
        dxx, dxy = unit_lo.derivative_matrix(0), unit_lo.derivative_matrix(1)
        contraction = D[0, 0] * (dxx @ dx) + D[0, 1] * (dxx @ dy) \
            + D[1, 0] * (dxy @ dx) + D[1, 1] * (dxy @ dy)
        second = pp.coeffs @ contraction.T \
            / (pp.mesh.h_cell ** 2)[:, None]
        out.coeffs[:, :second.shape[1]] += second
    if problem.reaction_const:
        out.coeffs -= problem.reaction_const * pp.coeffs
    elif problem.reaction_const is None:
        for c in range(pp.mesh.n_cells):
            basis = pp.basis(c)
            quad = pp.mesh.cell_quadrature(c, 2 * pp.degree + 2)
            vals = problem.reaction_values(quad.points) * pp.eval_cell(c, quad.points)
            phi = basis.eval(quad.points)
            mass = phi.T @ (quad.weights[:, None] * phi)
            out.coeffs[c] -= np.linalg.solve(mass, phi.T @ (quad.weights * vals))
    return out


class VemStateResiduals:
    """Projected residual fields and inconsistency groups of one VEM state."""

    def __init__(self, state, constants: EstimatorConstants):
        space = state.space
        problem = space.problem
        self.state = state
        self.piU = space.project_k(state.U)
        # w = L_h U + f_h carries the V_h part of the data-dependent operator
        self.w = DiscreteFunction(space, state.LhU.values + state.f_h.values)
        self.pi_lhat = space.project_k(self.w) - state.fhat
        self.Rhat = _apply_operator_to_poly(problem, self.piU) - self.pi_lhat
        gx, gy = space.project_gradient(state.U)
        self.grad = (gx, gy)
        psi_l2 = space.inconsistency_l2(self.w)
        psi_a = space.inconsistency_energy(state.U)
        h = space.mesh.h_cell
        self.incon_l2_cells = (h ** 2 * psi_l2) ** 2 + (h * psi_a) ** 2
        self.incon_h1_cells = (h * psi_l2) ** 2 + psi_a ** 2
        # slot norm of w (the computable time-estimator remainder)
        self.slot_w = float(np.sqrt(np.sum(space.slot_m_norms(self.w.values) ** 2)))

    def jump_values(self, e: int, pts: np.ndarray, orient_sign: float) -> np.ndarray:
        """Flux-jump of the projected solution across edge e at points pts."""
        mesh = self.state.space.mesh
        problem = self.state.space.problem
        le, ri = int(mesh.edge_left[e]), int(mesh.edge_right[e])
        if ri < 0:
            return np.zeros(len(pts))
        a, b = mesh.vertices[mesh.edge_vertices[e]]
        t = (b - a) / np.linalg.norm(b - a)
        normal = np.array([t[1], -t[0]])  # outward from the left cell
        D = problem.diffusion_values(pts)
        gl = self.piU.eval_grad_cell(le, pts)
        gr = self.piU.eval_grad_cell(ri, pts)
        flux = np.einsum("pij,pj->pi", D, gl - gr)
        return orient_sign * (flux @ normal)


def vem_state_residuals(state, constants) -> VemStateResiduals:
    key = "residuals"
    if key not in state.extra:
        state.extra[key] = VemStateResiduals(state, constants)
    return state.extra[key]


# ---------------------------------------------------------------------------
# single-mesh elliptic estimators
# ---------------------------------------------------------------------------

def elliptic_estimators(state, constants: EstimatorConstants):
    """(eta_L2, eta_H1, per-cell L2 indicator shares) for one state."""
    if state.space.kind == "fem":
        return _fem_elliptic_estimators(state, constants)
    res = vem_state_residuals(state, constants)
    space = state.space
    mesh = space.mesh
    h = mesh.h_cell
    r2 = space.broken_sq_norm_percell(res.Rhat)
    cell_l2 = h ** 4 * r2
    cell_h1 = h ** 2 * r2
    jump_sq = space.edge_jump_sq(res.piU)
    ws = space.edge_ws
    hs = mesh.h_edge[ws.edges]
    np.add.at(cell_l2, ws.eL, 0.5 * hs ** 3 * jump_sq[ws.edges])
    np.add.at(cell_l2, ws.eR, 0.5 * hs ** 3 * jump_sq[ws.edges])
    np.add.at(cell_h1, ws.eL, 0.5 * hs * jump_sq[ws.edges])
    np.add.at(cell_h1, ws.eR, 0.5 * hs * jump_sq[ws.edges])
    cell_l2 = cell_l2 + res.incon_l2_cells
    cell_h1 = cell_h1 + res.incon_h1_cells
    eta_l2 = constants.c_ell * np.sqrt(cell_l2.sum())
    eta_h1 = constants.c_ell * np.sqrt(cell_h1.sum())
    return eta_l2, eta_h1, np.sqrt(cell_l2)


def _fem_residual_field(state, w: DiscreteFunction, t_data: float) -> np.ndarray:
    """Unprojected element residual of w at quad points, data at t_data."""
    space = state.space
    problem = space.problem
    D = problem.diffusion_const
    if D is None:
        raise NotImplementedError("FEM residuals require constant diffusion")
    hess = space.hessian_at_quad(w)
    lw = D[0, 0] * hess[..., 0, 0] + (D[0, 1] + D[1, 0]) * hess[..., 0, 1] \
        + D[1, 1] * hess[..., 1, 1]
    pts = space.xq.reshape(-1, 2)
    r = problem.reaction_values(pts).reshape(space.xq.shape[:2])
    if np.any(r):
        lw = lw - r * space.values_at_quad(w)
    key = ("ptilde", t_data)
    if key not in state.extra:
        if t_data == getattr(state, "t", None) and hasattr(state, "f_h"):
            state.extra[key] = state.f_h
        else:
            state.extra[key] = space.l2_recon(problem.forcing_at(t_data))
    ptilde = state.extra[key]
    lhat = space.values_at_quad(state.extra.get("lh_override", state.LhU)) \
        + space.values_at_quad(ptilde) \
        - problem.forcing_at(t_data)(pts).reshape(space.xq.shape[:2])
    return lw - lhat


def _fem_elliptic_estimators(state, constants: EstimatorConstants):
    space = state.space
    mesh = space.mesh
    resid = _fem_residual_field(state, state.U, state.t)
    cell_r2 = np.einsum("cq,cq->c", space.wq, resid ** 2)
    h = mesh.h_cell
    cell_l2 = h ** 4 * cell_r2
    cell_h1 = h ** 2 * cell_r2
    jump_sq = space.jump_sq_per_edge(state.U)
    for e in range(mesh.n_edges):
        if mesh.edge_is_boundary[e]:
            continue
        hs = mesh.h_edge[e]
        for side in (int(mesh.edge_left[e]), int(mesh.edge_right[e])):
            cell_l2[side] += 0.5 * hs ** 3 * jump_sq[e]
            cell_h1[side] += 0.5 * hs * jump_sq[e]
    eta_l2 = constants.c_ell * np.sqrt(cell_l2.sum())
    eta_h1 = constants.c_ell * np.sqrt(cell_h1.sum())
    return eta_l2, eta_h1, np.sqrt(cell_l2)


# ---------------------------------------------------------------------------
# two-mesh terms
# ---------------------------------------------------------------------------

def mesh_transfer_estimator(state, prev_state, pieces, constants) -> float:
    """eta_M: computable bound of ||U_prev - T U_prev|| / tau."""
    space, prev_space = state.space, prev_state.space
    tau = state.tau
    if space.kind == "fem":
        pts = space.xq_flat
        hints = space.xq_hints
        old_vals = prev_space.field_at(pts, [(1.0, prev_state.U)], hints=hints)
        new_vals = space.values_at_quad(state.TU_prev).ravel()
        diff2 = ((old_vals - new_vals) ** 2).reshape(space.xq.shape[:2])
        return float(np.sqrt(np.einsum("cq,cq->", space.wq, diff2))) / tau
    if space is prev_space and \
            np.array_equal(state.TU_prev.values, prev_state.U.values):
        return 0.0
    res_prev = vem_state_residuals(prev_state, constants)
    pi_old = res_prev.piU
    pi_new = space.project_k(state.TU_prev)
    if space.mesh is prev_space.mesh:
        proj_term = np.sqrt(max(
            space.broken_sq_norm_percell(pi_new - pi_old).sum(), 0.0))
    else:
        proj_term = np.sqrt(overlay_l2_diff_sq(pieces, pi_new, pi_old))
    slot_new = float(np.sqrt(np.sum(space.slot_m_norms(state.TU_prev.values) ** 2)))
    slot_old = float(np.sqrt(np.sum(
        prev_space.slot_m_norms(prev_state.U.values) ** 2)))
    return (proj_term + constants.c_stab * (slot_new + slot_old)) / tau


def time_estimator(state, prev_state, pieces, constants) -> float:
    """eta_T: computable bound of the reconstruction-data time difference."""
    space, prev_space = state.space, prev_state.space
    if space.kind == "fem":
        pts = space.xq_flat
        hints = space.xq_hints
        problem = space.problem
        p_new = state.f_h
        field_new = space.values_at_quad(state.LhU).ravel() \
            + space.values_at_quad(p_new).ravel() \
            - problem.forcing_at(state.t)(pts)
        field_old = prev_space.field_at(
            pts, [(1.0, prev_state.LhU), (1.0, prev_state.f_h)], hints=hints) \
            - problem.forcing_at(prev_state.t)(pts)
        diff2 = ((field_new - field_old) ** 2).reshape(space.xq.shape[:2])
        return float(np.sqrt(np.einsum("cq,cq->", space.wq, diff2)))
    res_new = vem_state_residuals(state, constants)
    res_old = vem_state_residuals(prev_state, constants)
    if space is prev_space:
        proj = np.sqrt(max(space.broken_sq_norm_percell(
            res_new.pi_lhat - res_old.pi_lhat).sum(), 0.0))
    else:
        proj = np.sqrt(overlay_l2_diff_sq(pieces, res_new.pi_lhat, res_old.pi_lhat))
    return proj + constants.c_stab * (res_new.slot_w + res_old.slot_w)


def data_estimators(state, constants) -> tuple[tuple, float]:
    """theta_T samples over (t_prev, t] and theta_S at the step."""
    space = state.space
    problem = space.problem
    t1, tau = state.t, state.tau
    x01, w01 = gauss_legendre_01(3)
    t_samples = t1 - tau + x01 * tau
    f_end = problem.forcing_at(t1)
    vals = []
    if space.kind == "fem":
        pts = space.xq_flat
        f_end_vals = f_end(pts)
        for ts in t_samples:
            d2 = ((problem.forcing_at(ts)(pts) - f_end_vals) ** 2) \
                .reshape(space.xq.shape[:2])
            vals.append(float(np.sqrt(np.einsum("cq,cq->", space.wq, d2))))
    else:
        stacks = [(grp, grp.qpts.reshape(-1, 2)) for grp in space.groups]
        ends = [f_end(pts).reshape(grp.qpts.shape[:2]) for grp, pts in stacks]
        for ts in t_samples:
            f_s = problem.forcing_at(ts)
            acc = 0.0
            for (grp, pts), fe in zip(stacks, ends):
                d = f_s(pts).reshape(grp.qpts.shape[:2]) - fe
                acc += float(np.einsum("gq,gq->", grp.qw, d ** 2))
            vals.append(np.sqrt(acc))
    theta_t = (tuple(w01), tuple(vals))

    if space.kind == "fem":
        theta_s = 0.0  # identity data projector
    else:
        acc = 0.0
        for grp, (pts, wts, phi, _) in zip(space.groups,
                                           space.fine_quad(2 * space.k + 6)):
            fv = f_end(pts.reshape(-1, 2)).reshape(pts.shape[:2])
            pv = np.einsum("gqi,gi->gq", phi, state.fhat.coeffs[grp.cells])
            d2 = np.einsum("gq,gq->g", wts, (fv - pv) ** 2)
            acc += float(np.sum(grp.h ** 2 * d2))
        theta_s = constants.c_data * np.sqrt(acc)
    return theta_t, theta_s


def space_estimator_local(state, prev_state, diff, pieces, constants,
                          eta_mesh: float) -> float:
    """eta_S for nested (local) mesh modification, VEM computable form."""
    space, prev_space = state.space, prev_state.space
    mesh, prev_mesh = space.mesh, prev_space.mesh
    tau = state.tau
    res_new = vem_state_residuals(state, constants)
    res_old = vem_state_residuals(prev_state, constants)

    transfer_sq = (tau * eta_mesh) ** 2

    h4 = mesh.h_cell ** 4
    if mesh is prev_mesh:
        resid_diff_sq = float(np.sum(
            h4 * space.broken_sq_norm_percell(res_new.Rhat - res_old.Rhat)))
    else:
        resid_diff_sq = overlay_l2_diff_sq(pieces, res_new.Rhat, res_old.Rhat,
                                           weights_new=h4)

    # jump difference over the union skeleton
    npts = space.k + 2
    jump_diff_sq = 0.0
    if mesh is prev_mesh:
        ws = space.edge_ws
        d = space.edge_jump_values(res_new.piU) \
            - space.edge_jump_values(res_old.piU)
        per_edge = np.einsum("eg,eg->e", ws.wts, d ** 2)
        jump_diff_sq = float(np.sum(mesh.h_edge[ws.edges] ** 3 * per_edge))
        diff_cells_sq = 0.0
        diff_edges_sq = 0.0
        # on one space the reconstruction-inconsistency terms of the proof
        # bound a difference, which keeps the bound O(tau)-small; see ledger
        h = mesh.h_cell
        psi_l2_diff = space.slot_m_norms(res_new.w.values - res_old.w.values) \
            * np.sqrt(1.0 + constants.c_stab)
        psi_a_diff = space.inconsistency_energy(
            DiscreteFunction(space, state.U.values - prev_state.U.values))
        incon_sq = float(np.sum((h ** 2 * psi_l2_diff) ** 2
                                + (h * psi_a_diff) ** 2))
        total = transfer_sq + constants.c_ell ** 2 * (
            resid_diff_sq + jump_diff_sq + incon_sq)
        return np.sqrt(max(total, 0.0)) / tau
    else:
        coords = mesh.forest.coords()
        soup = skeleton_soup(mesh, prev_mesh, diff)
        for seg in soup:
            pts, wts, _ = segment_rule(coords, seg, npts)
            jn = np.zeros(len(pts))
            jo = np.zeros(len(pts))
            if seg.new_edge is not None:
                sign = _orient_sign(mesh, seg.new_edge, seg.va, seg.vb, coords)
                jn = res_new.jump_values(seg.new_edge, pts, sign)
            if seg.old_edge is not None:
                sign = _orient_sign(prev_mesh, seg.old_edge, seg.va, seg.vb, coords)
                jo = res_old.jump_values(seg.old_edge, pts, sign)
            hw = mesh.h_edge[seg.new_edge] if seg.new_edge is not None \
                else mesh.h_cell[seg.new_cell]
            jump_diff_sq += hw ** 3 * float(wts @ (jn - jo) ** 2)

        # old residual terms supported on the modified region
        diff_cells_sq = 0.0
        for c in diff.cells_only_in_old:
            quad = prev_mesh.cell_quadrature(c, 2 * space.k)
            r2 = float(quad.weights @ res_old.Rhat.eval_cell(c, quad.points) ** 2)
            diff_cells_sq += diff.hhat_cells_old[c] ** 4 * r2
        diff_edges_sq = 0.0
        x01, w01 = gauss_legendre_01(npts)
        for e in diff.edges_only_in_old:
            if prev_mesh.edge_is_boundary[e]:
                continue
            a, b = prev_mesh.vertices[prev_mesh.edge_vertices[e]]
            pts = a[None, :] + x01[:, None] * (b - a)[None, :]
            wts = w01 * np.linalg.norm(b - a)
            j2 = float(wts @ res_old.jump_values(e, pts, 1.0) ** 2)
            diff_edges_sq += diff.hhat_edges_old[e] ** 3 * j2

    incon_sq = res_new.incon_l2_cells.sum() + res_old.incon_l2_cells.sum()
    total = transfer_sq + constants.c_ell ** 2 * (
        resid_diff_sq + jump_diff_sq + diff_cells_sq + diff_edges_sq + incon_sq)
    return np.sqrt(max(total, 0.0)) / tau


def _orient_sign(mesh, e: int, seg_va: int, seg_vb: int, coords) -> float:
    """+1 when the segment direction matches the stored edge direction."""
    a, b = (int(v) for v in mesh.edge_vertices[e])
    if (seg_va, seg_vb) == (a, b):
        return 1.0
    if (seg_va, seg_vb) == (b, a):
        return -1.0
    dot = np.dot(coords[seg_vb] - coords[seg_va], coords[b] - coords[a])
    return 1.0 if dot >= 0 else -1.0


def space_estimator_global(state, prev_state, constants) -> float:
    """eta_S for the moving-mesh FEM backend (elliptic transfer form)."""
    space, prev_space = state.space, prev_state.space
    problem = space.problem
    tau = state.tau
    mesh = space.mesh
    # R^n_n(U^n)
    r_new = _fem_residual_field(state, state.U, state.t)
    # R^n_{n-1}(T U^{n-1}) on the same (new) space with data at t_prev
    tu = state.TU_prev
    lh_tu = space.discrete_laplacian(tu)
    shadow = _ShadowState(space, tu, lh_tu, state.extra)
    r_old = _fem_residual_field(shadow, tu, prev_state.t)
    d2 = (r_new - r_old) ** 2
    h = mesh.h_cell
    term1 = float(np.einsum("c,cq,cq->", h ** 4, space.wq, d2))

    diff_fn = DiscreteFunction(space, state.U.values - tu.values)
    jump_sq = space.jump_sq_per_edge(diff_fn)
    term2 = 0.0
    for e in range(mesh.n_edges):
        if not mesh.edge_is_boundary[e]:
            hs = mesh.h_edge[e]
            term2 += hs ** 3 * jump_sq[e]

    # (Pi_n - I) Lhat^{n-1}_{n-1} U^{n-1}
    pts = space.xq_flat
    hints = space.xq_hints
    g_old = prev_space.field_at(
        pts, [(1.0, prev_state.LhU), (1.0, prev_state.f_h)], hints=hints) \
        - problem.forcing_at(prev_state.t)(pts)
    gq = g_old.reshape(space.xq.shape[:2])
    rhs = np.zeros(space.ndofs)
    cell_rhs = np.einsum("cq,qa->ca", space.wq * gq, space.N)
    np.add.at(rhs, space.cells_arr.ravel(), cell_rhs.ravel())
    pg = DiscreteFunction(space, space.mass_solver().solve_full(rhs))
    resid = gq - space.values_at_quad(pg)
    term3 = float(np.einsum("c,cq,cq->", h ** 4, space.wq, resid ** 2))

    return constants.c_ell * np.sqrt(term1 + term2 + term3) / tau


class _ShadowState:
    """Minimal state-like wrapper to evaluate residuals of another function."""

    def __init__(self, space, U, LhU, extra):
        self.space = space
        self.U = U
        self.LhU = LhU
        self.extra = dict(extra)
        self.extra["lh_override"] = LhU


# ---------------------------------------------------------------------------
# accumulation machinery
# ---------------------------------------------------------------------------

def accumulation_weight(p, r: float, lam: float, c_equiv: float,
                        c_pf: float) -> float:
    """c_{p,r} = ||beta_r||_{L^q(0,r)} with beta_r(s) = exp(alpha (s - r))."""
    if p == 1:
        return 1.0
    alpha = 2.0 * (1.0 - lam) / (c_equiv * c_pf) ** 2
    if p == np.inf:
        q = 1.0
    else:
        q = p / (p - 1.0)
    if alpha <= 1e-14:  # lambda -> 1 limit
        return r ** (1.0 / q)
    return ((1.0 - np.exp(-q * alpha * r)) / (q * alpha)) ** (1.0 / q)


@dataclass
class TermSeries:
    """Piecewise-constant-in-step estimator values (or sampled profiles)."""

    times: list = field(default_factory=list)       # interval endpoints t^n
    taus: list = field(default_factory=list)
    values: list = field(default_factory=list)      # constant per interval
    samples: list = field(default_factory=list)     # optional (w, v) tuples

    def add(self, t: float, tau: float, value: float, sample=None) -> None:
        self.times.append(t)
        self.taus.append(tau)
        self.values.append(value)
        self.samples.append(sample)

    def _interval_lp(self, i: int, p: float) -> float:
        if self.samples[i] is not None:
            w, v = self.samples[i]
            if p == np.inf:
                return max(v)
            return float(self.taus[i] * sum(wi * vi ** p for wi, vi in zip(w, v)))
        if p == np.inf:
            return self.values[i]
        return self.taus[i] * self.values[i] ** p

    def lp_norm(self, p: float) -> float:
        if not self.values:
            return 0.0
        if p == np.inf:
            return max(self._interval_lp(i, p) for i in range(len(self.values)))
        return sum(self._interval_lp(i, p) for i in range(len(self.values))) \
            ** (1.0 / p)

    def min_lp(self, ps=(1, 2)) -> float:
        return min(self.lp_norm(p) for p in ps) if self.values else 0.0

    def weighted_accumulation(self, lam, c_equiv, c_pf) -> float:
        """A_{[1,inf]}: min_p c_{p,t} ||F||_{L^p(0,t)} over p in {1,2,inf}."""
        if not self.values:
            return 0.0
        t = self.times[-1]
        cands = []
        for p in (1, 2, np.inf):
            c = accumulation_weight(p, t, lam, c_equiv, c_pf)
            cands.append(c * self.lp_norm(p))
        return min(cands)

    def weighted_accumulation_2inf(self, lam, c_equiv, c_pf) -> float:
        """A~_{[2,inf]}: min(||F||_{L^2}, sqrt(c_{inf,t}) ||F||_{L^inf})."""
        if not self.values:
            return 0.0
        t = self.times[-1]
        c_inf = accumulation_weight(np.inf, t, lam, c_equiv, c_pf)
        return min(self.lp_norm(2), np.sqrt(c_inf) * self.lp_norm(np.inf))


@dataclass
class AccumulationState:
    """Running accumulations of all terms plus the hat-weighted elliptic ones."""

    lam: float
    c_equiv: float
    c_pf: float
    e0: float = 0.0
    ellip_l2_nodes: list = field(default_factory=list)   # (t, value)
    ellip_h1_nodes: list = field(default_factory=list)
    eta_space: TermSeries = field(default_factory=TermSeries)
    eta_time: TermSeries = field(default_factory=TermSeries)
    eta_mesh: TermSeries = field(default_factory=TermSeries)
    theta_t: TermSeries = field(default_factory=TermSeries)
    theta_s: TermSeries = field(default_factory=TermSeries)

    def push(self, bd: EstimatorBreakdown) -> None:
        if bd.n == 0:
            self.ellip_l2_nodes.append((bd.t, bd.eta_ellip_l2))
            self.ellip_h1_nodes.append((bd.t, bd.eta_ellip_h1))
            return
        self.ellip_l2_nodes.append((bd.t, bd.eta_ellip_l2))
        self.ellip_h1_nodes.append((bd.t, bd.eta_ellip_h1))
        self.eta_space.add(bd.t, bd.tau, bd.eta_space)
        self.eta_time.add(bd.t, bd.tau, bd.eta_time)
        self.eta_mesh.add(bd.t, bd.tau, bd.eta_mesh)
        self.theta_t.add(bd.t, bd.tau, bd.theta_t_linf, bd.theta_t_samples)
        self.theta_s.add(bd.t, bd.tau, bd.theta_s)

    def _hat_l2_norm(self, nodes) -> float:
        """L2(0,t) norm of the piecewise-linear interpolant of nodal values."""
        total = 0.0
        for i in range(1, len(nodes)):
            t0, a = nodes[i - 1]
            t1, b = nodes[i]
            total += (t1 - t0) * (a * a + a * b + b * b) / 3.0
        return np.sqrt(total)

    def total_l2h1(self) -> float:
        return (self.e0
                + self._hat_l2_norm(self.ellip_h1_nodes)
                + self.theta_s.lp_norm(2)
                + self.eta_time.min_lp((1, 2))
                + self.eta_mesh.min_lp((1, 2))
                + self.theta_t.min_lp((1, 2)))

    def total_linf_l2(self) -> float:
        args = (self.lam, self.c_equiv, self.c_pf)
        ell_max = max(v for _, v in self.ellip_l2_nodes) if self.ellip_l2_nodes else 0.0
        return (self.e0
                + ell_max
                + self.eta_space.weighted_accumulation(*args)
                + self.eta_time.weighted_accumulation(*args)
                + self.eta_mesh.weighted_accumulation(*args)
                + self.theta_t.weighted_accumulation(*args)
                + self.theta_s.weighted_accumulation_2inf(*args))


def initial_error_seed(state, problem) -> float:
    """||u0 - Pi0_k U^0|| (VEM) or ||u0 - U^0|| (FEM)."""
    space = state.space
    if space.kind == "fem":
        pts = space.xq_flat
        d = problem.u0(pts).reshape(space.xq.shape[:2]) \
            - space.values_at_quad(state.U)
        return float(np.sqrt(np.einsum("cq,cq->", space.wq, d ** 2)))
    pu = space.project_k(state.U)
    acc = 0.0
    for grp, (pts, wts, phi, _) in zip(space.groups,
                                       space.fine_quad(2 * space.k + 6)):
        u0_vals = problem.u0(pts.reshape(-1, 2)).reshape(pts.shape[:2])
        pv = np.einsum("gqi,gi->gq", phi, pu.coeffs[grp.cells])
        acc += float(np.einsum("gq,gq->", wts, (u0_vals - pv) ** 2))
    return np.sqrt(acc)


# ---------------------------------------------------------------------------
# true errors
# ---------------------------------------------------------------------------

@dataclass
class ErrorAccumulator:
    """Running true-error norms against a supplied exact solution."""

    linf_l2: float = 0.0
    l2_h1_sq: float = 0.0

    def error_linf(self) -> float:
        return self.linf_l2

    def error_l2h1(self) -> float:
        return np.sqrt(self.l2_h1_sq)


def true_error_step(state, prev_state, pieces, problem,
                    acc: ErrorAccumulator, n_linf_samples: int = 7) -> None:
    """Update true-error norms over the interval (t_prev, t]."""
    if problem.exact is None:
        raise NoExactSolution("benchmark has no exact solution")
    space, prev_space = state.space, prev_state.space
    t0, t1 = prev_state.t, state.t

    if space.kind == "fem":
        pts = space.xq_flat
        hints = space.xq_hints
        new_q = space.values_at_quad(state.U).ravel()
        old_q = prev_space.field_at(pts, [(1.0, prev_state.U)], hints=hints)

        for s in np.linspace(0.0, 1.0, n_linf_samples):
            t = t0 + s * (t1 - t0)
            u_vals = problem.exact(pts, t)
            U_vals = (1 - s) * old_q + s * new_q
            d2 = ((u_vals - U_vals) ** 2).reshape(space.xq.shape[:2])
            acc.linf_l2 = max(acc.linf_l2,
                              np.sqrt(float(np.einsum("cq,cq->", space.wq, d2))))
        # 2-point Gauss in time for the energy error
        gx, gw = gauss_legendre_01(2)
        gnew = space.grads_at_quad(state.U).reshape(-1, 2)
        # gradient of the old solution at new quad points via fem evaluation
        cells, refs = prev_space.locate(pts, hints)
        from .fem import _shape_grad
        dN = _shape_grad(refs)
        nodes = prev_space.nodes[cells]
        J = np.einsum("paj,pai->pij", dN, nodes)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / det
        inv[:, 0, 1] = -J[:, 0, 1] / det
        inv[:, 1, 0] = -J[:, 1, 0] / det
        inv[:, 1, 1] = J[:, 0, 0] / det
        gradN = np.einsum("paj,pji->pai", dN, inv)
        gold = np.einsum("pai,pa->pi", gradN,
                         prev_state.U.values[prev_space.cells_arr[cells]])
        D = problem.diffusion_values(pts)
        r = problem.reaction_values(pts)
        for s, w in zip(gx, gw):
            t = t0 + s * (t1 - t0)
            gu = problem.exact_grad(pts, t)
            du = problem.exact(pts, t) - ((1 - s) * old_q + s * new_q)
            dg = gu - ((1 - s) * gold + s * gnew)
            energy = np.einsum("pij,pi,pj->p", D, dg, dg) + r * du ** 2
            acc.l2_h1_sq += w * (t1 - t0) * float(
                np.einsum("cq,cq->", space.wq, energy.reshape(space.xq.shape[:2])))
        return

    res_new = vem_state_residuals(state, None)
    res_old = vem_state_residuals(prev_state, None)
    gx_new, gy_new = state.extra.setdefault(
        "pgrad", space.project_gradient(state.U))
    gx_old, gy_old = prev_state.extra.setdefault(
        "pgrad", prev_space.project_gradient(prev_state.U))

    if space is prev_space:
        _vem_fixed_mesh_errors(state, prev_state, problem, acc,
                               (gx_new, gy_new), (gx_old, gy_old),
                               n_linf_samples)
        return

    quads = [(pc, pc[0].cell_quadrature(pc[1], 2 * space.k + 4))
             for pc in pieces]

    for s in np.linspace(0.0, 1.0, n_linf_samples):
        t = t0 + s * (t1 - t0)
        err2 = 0.0
        for (gmesh, piece, c_new, c_old), quad in quads:
            u_vals = problem.exact(quad.points, t)
            U_vals = s * res_new.piU.eval_cell(c_new, quad.points) \
                + (1 - s) * res_old.piU.eval_cell(c_old, quad.points)
            err2 += float(quad.weights @ (u_vals - U_vals) ** 2)
        acc.linf_l2 = max(acc.linf_l2, np.sqrt(err2))

    gt, gw = gauss_legendre_01(2)
    for s, w in zip(gt, gw):
        t = t0 + s * (t1 - t0)
        err2 = 0.0
        for (gmesh, piece, c_new, c_old), quad in quads:
            D = problem.diffusion_values(quad.points)
            r = problem.reaction_values(quad.points)
            gu = problem.exact_grad(quad.points, t)
            gU = np.stack([
                s * gx_new.eval_cell(c_new, quad.points)
                + (1 - s) * gx_old.eval_cell(c_old, quad.points),
                s * gy_new.eval_cell(c_new, quad.points)
                + (1 - s) * gy_old.eval_cell(c_old, quad.points)], axis=1)
            du = problem.exact(quad.points, t) \
                - (s * res_new.piU.eval_cell(c_new, quad.points)
                   + (1 - s) * res_old.piU.eval_cell(c_old, quad.points))
            dg = gu - gU
            energy = np.einsum("pij,pi,pj->p", D, dg, dg) + r * du ** 2
            err2 += float(quad.weights @ energy)
        acc.l2_h1_sq += w * (t1 - t0) * err2


def _vem_fixed_mesh_errors(state, prev_state, problem, acc, grads_new,
                           grads_old, n_linf_samples) -> None:
    """Vectorized true-error update when both states share the mesh."""
    space = state.space
    t0, t1 = prev_state.t, state.t
    res_new = vem_state_residuals(state, None)
    res_old = vem_state_residuals(prev_state, None)
    gx_new, gy_new = grads_new
    gx_old, gy_old = grads_old
    stacks = []
    for grp, (pts, wts, phi, phim) in zip(space.groups,
                                          space.fine_quad(2 * space.k + 4)):
        flat = pts.reshape(-1, 2)
        stacks.append((grp, pts, wts, phi, phim, flat,
                       np.einsum("gqi,gi->gq", phi, res_new.piU.coeffs[grp.cells]),
                       np.einsum("gqi,gi->gq", phi, res_old.piU.coeffs[grp.cells])))

    for s in np.linspace(0.0, 1.0, n_linf_samples):
        t = t0 + s * (t1 - t0)
        err2 = 0.0
        for grp, pts, wts, phi, phim, flat, new_v, old_v in stacks:
            u_vals = problem.exact(flat, t).reshape(pts.shape[:2])
            U_vals = s * new_v + (1 - s) * old_v
            err2 += float(np.einsum("gq,gq->", wts, (u_vals - U_vals) ** 2))
        acc.linf_l2 = max(acc.linf_l2, np.sqrt(err2))

    gt, gw = gauss_legendre_01(2)
    for grp, pts, wts, phi, phim, flat, new_v, old_v in stacks:
        D = problem.diffusion_values(flat).reshape(*pts.shape[:2], 2, 2)
        r = problem.reaction_values(flat).reshape(pts.shape[:2])
        gxn = np.einsum("gqi,gi->gq", phim, gx_new.coeffs[grp.cells])
        gyn = np.einsum("gqi,gi->gq", phim, gy_new.coeffs[grp.cells])
        gxo = np.einsum("gqi,gi->gq", phim, gx_old.coeffs[grp.cells])
        gyo = np.einsum("gqi,gi->gq", phim, gy_old.coeffs[grp.cells])
        for s, w in zip(gt, gw):
            t = t0 + s * (t1 - t0)
            gu = problem.exact_grad(flat, t).reshape(*pts.shape[:2], 2)
            dgx = gu[..., 0] - (s * gxn + (1 - s) * gxo)
            dgy = gu[..., 1] - (s * gyn + (1 - s) * gyo)
            du = problem.exact(flat, t).reshape(pts.shape[:2]) \
                - (s * new_v + (1 - s) * old_v)
            energy = D[..., 0, 0] * dgx ** 2 \
                + (D[..., 0, 1] + D[..., 1, 0]) * dgx * dgy \
                + D[..., 1, 1] * dgy ** 2 + r * du ** 2
            acc.l2_h1_sq += w * (t1 - t0) * float(
                np.einsum("gq,gq->", wts, energy))


def convergence_rate(coarse: float, fine: float, h_coarse: float,
                     h_fine: float) -> float:
    """Log-ratio rate between two resolutions."""
    if coarse <= 0 or fine <= 0:
        return float("nan")
    return float(np.log(coarse / fine) / np.log(h_coarse / h_fine))
