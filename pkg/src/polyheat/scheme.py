"""Problem data and backward Euler time stepping in the abstract framework."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .discrete import DiscreteFunction, InteriorSolver
from .errors import InternalError

UNIT_SQUARE_LAMBDA1 = 2.0 * np.pi ** 2  # first Dirichlet eigenvalue


class ProblemData:
    """Reaction-diffusion data on the unit square.

    diffusion may be a scalar, a constant 2x2 array or a callable
    (points -> (n, 2, 2)); reaction a scalar or callable (points -> (n,)).
    forcing takes (points, t).  When the exact solution is supplied it also
    provides Dirichlet boundary values for benchmarks whose solution does
    not vanish on the boundary.
    """

    def __init__(self, diffusion=1.0, reaction=0.0, forcing=None, u0=None,
                 final_time=1.0, exact=None, exact_grad=None, exact_dt=None,
                 dirichlet=None, name="custom"):
        self.name = name
        self.final_time = float(final_time)
        self.forcing = forcing or (lambda pts, t: np.zeros(len(pts)))
        self.u0 = u0 or (lambda pts: np.zeros(len(pts)))
        self.exact = exact
        self.exact_grad = exact_grad
        self.exact_dt = exact_dt
        self.dirichlet = dirichlet
        self._setup_diffusion(diffusion)
        self._setup_reaction(reaction)
        self.c_pf = 1.0 / np.sqrt(UNIT_SQUARE_LAMBDA1 * self.a_star)
        self.c_equiv = max(np.sqrt(self.a_sup + self.r_sup / UNIT_SQUARE_LAMBDA1),
                           1.0 / np.sqrt(self.a_star))

    def _setup_diffusion(self, diffusion):
        if np.isscalar(diffusion):
            self.diffusion_const = np.eye(2) * float(diffusion)
        elif isinstance(diffusion, np.ndarray):
            self.diffusion_const = np.asarray(diffusion, dtype=float)
        else:
            self.diffusion_const = None
            self._diffusion_fn = diffusion
        if self.diffusion_const is not None:
            eigs = np.linalg.eigvalsh(self.diffusion_const)
            self.a_star, self.a_sup = float(eigs[0]), float(eigs[-1])
            if self.a_star <= 0:
                raise ValueError("diffusion must be positive definite")
        else:
            probe = self._diffusion_fn(np.random.default_rng(0).uniform(0, 1, (64, 2)))
            eigs = np.linalg.eigvalsh(probe)
            self.a_star, self.a_sup = float(eigs[:, 0].min()), float(eigs[:, -1].max())

    def _setup_reaction(self, reaction):
        if np.isscalar(reaction):
            r = float(reaction)
            self.reaction_const = r
            self.r_star, self.r_sup = r, r
        else:
            self.reaction_const = None
            self._reaction_fn = reaction
            probe = self._reaction_fn(np.random.default_rng(1).uniform(0, 1, (64, 2)))
            self.r_star, self.r_sup = float(np.min(probe)), float(np.max(np.abs(probe)))
        if self.r_star < 0:
            raise ValueError("reaction must be nonnegative")

    def diffusion_values(self, points: np.ndarray) -> np.ndarray:
        if self.diffusion_const is not None:
            return np.broadcast_to(self.diffusion_const, (len(points), 2, 2))
        return self._diffusion_fn(points)

    def reaction_values(self, points: np.ndarray) -> np.ndarray:
        if self.reaction_const is not None:
            return np.full(len(points), self.reaction_const)
        return self._reaction_fn(points)

    def forcing_at(self, t: float) -> Callable:
        return lambda pts: self.forcing(pts, t)

    def boundary_values_at(self, t: float) -> Optional[Callable]:
        if self.dirichlet is None:
            return None
        return lambda pts: self.dirichlet(pts, t)


@dataclass
class StepState:
    """Everything the estimators need about one accepted time level."""

    n: int
    t: float
    tau: float
    space: object
    U: DiscreteFunction
    TU_prev: Optional[DiscreteFunction]      # transferred previous solution
    fhat: object                             # projected forcing (broken poly / field)
    f_h: DiscreteFunction                    # l2_recon of fhat
    LhU: DiscreteFunction                    # discrete spatial operator applied to U
    extra: dict = field(default_factory=dict)

    def dbar(self) -> DiscreteFunction:
        """Discrete time derivative (U - T U_prev) / tau."""
        if self.TU_prev is None:
            raise InternalError("initial state has no time derivative")
        return DiscreteFunction(self.space,
                                (self.U.values - self.TU_prev.values) / self.tau)


def _interpolate_boundary(space, g) -> np.ndarray:
    """DoF vector carrying interpolated boundary data (zero inside)."""
    lifted = space.interpolate(g, zero_boundary=False)
    vals = np.zeros_like(lifted.values)
    vals[space.boundary_mask] = lifted.values[space.boundary_mask]
    return vals


def compute_spatial_operator(space, U: DiscreteFunction) -> DiscreteFunction:
    """L_h U from -m_h(L_h U, phi) = A_h(U, phi) over interior phi."""
    rhs = -(space.a_mat @ U.values)
    return DiscreteFunction(space, space.mass_solver().solve_full(rhs))


def initial_state(space, problem: ProblemData) -> StepState:
    """Interpolate the initial datum and prepare estimator inputs at t = 0."""
    g0 = problem.boundary_values_at(0.0)
    if g0 is not None:
        U0 = space.interpolate(lambda pts: problem.u0(pts), zero_boundary=False)
        # keep interpolated boundary trace, which matches the exact datum
    else:
        U0 = space.interpolate(lambda pts: problem.u0(pts), zero_boundary=True)
    fhat = space.project_data(problem.forcing_at(0.0))
    f_h = space.l2_recon(fhat)
    LhU = compute_spatial_operator(space, U0)
    return StepState(n=0, t=0.0, tau=0.0, space=space, U=U0, TU_prev=None,
                     fhat=fhat, f_h=f_h, LhU=LhU)


def advance(prev: StepState, new_space, transfer_kind: str, tau: float,
            problem: ProblemData, fcc=None) -> StepState:
    """One backward Euler step onto (a possibly different) space."""
    from . import transfer as transfer_mod

    t_new = prev.t + tau
    TU = transfer_mod.apply_transfer(transfer_kind, prev, new_space, problem)
    fhat = new_space.project_data(problem.forcing_at(t_new))

    system = new_space.m_mat / tau + new_space.a_mat
    solver = InteriorSolver(system, new_space.interior)
    rhs = new_space.data_pairing(fhat) + (new_space.m_mat @ TU.values) / tau
    g = problem.boundary_values_at(t_new)
    bvals = _interpolate_boundary(new_space, g) if g is not None else None
    U = DiscreteFunction(new_space, solver.solve_full(rhs, bvals))

    f_h = new_space.l2_recon(fhat)
    LhU = compute_spatial_operator(new_space, U)
    return StepState(n=prev.n + 1, t=t_new, tau=tau, space=new_space, U=U,
                     TU_prev=TU, fhat=fhat, f_h=f_h, LhU=LhU)


def scheme_residual_dual_norm(state: StepState) -> float:
    """m_h-dual norm of the discrete scheme residual (diagnostic)."""
    space = state.space
    r = (space.m_mat @ state.dbar().values) + (space.a_mat @ state.U.values) \
        - space.data_pairing(state.fhat)
    rI = r[space.interior]
    if len(rI) == 0:
        return 0.0
    x = space.mass_solver().solve(rI)
    return float(np.sqrt(abs(rI @ x)))
