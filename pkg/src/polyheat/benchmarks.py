"""Benchmark problem definitions with hand-derived forcing terms.

Each benchmark supplies the exact solution, its gradient and the matching
right-hand side f = u_t - div(D grad u) + r u, written with numerically
stable primitives (expit/tanh) so the sharp-layer solutions do not overflow.
"""

import numpy as np
from scipy.special import expit

from .scheme import ProblemData


def _sinsin(pts):
    return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


def oscillating_problem(final_time: float = 1.0) -> ProblemData:
    """u = sin(5 pi t) sin(pi x) sin(pi y), alpha = 1, homogeneous Dirichlet."""

    def exact(pts, t):
        return np.sin(5 * np.pi * t) * _sinsin(pts)

    def exact_grad(pts, t):
        s = np.sin(5 * np.pi * t)
        gx = np.pi * np.cos(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])
        gy = np.pi * np.sin(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1])
        return s * np.stack([gx, gy], axis=1)

    def forcing(pts, t):
        return (5 * np.pi * np.cos(5 * np.pi * t)
                + 2 * np.pi ** 2 * np.sin(5 * np.pi * t)) * _sinsin(pts)

    return ProblemData(diffusion=1.0, reaction=0.0, forcing=forcing,
                       u0=lambda pts: np.zeros(len(pts)),
                       final_time=final_time, exact=exact,
                       exact_grad=exact_grad, name="vem_oscillating")


def layer_problem(final_time: float = 1.0) -> ProblemData:
    """Internal layer along x + y = t moving across the unit square."""

    def parts(pts, t):
        s = expit(10.0 * (t - pts[:, 0] - pts[:, 1]))
        return s, s * (1.0 - s)

    def exact(pts, t):
        return parts(pts, t)[0]

    def exact_grad(pts, t):
        _, sp = parts(pts, t)
        g = -10.0 * sp
        return np.stack([g, g], axis=1)

    def forcing(pts, t):
        s, sp = parts(pts, t)
        u_t = 10.0 * sp
        lap = 200.0 * sp * (1.0 - 2.0 * s)
        return u_t - lap

    return ProblemData(diffusion=1.0, reaction=0.0, forcing=forcing,
                       u0=lambda pts: exact(pts, 0.0),
                       final_time=final_time, exact=exact,
                       exact_grad=exact_grad, dirichlet=exact,
                       name="vem_layer")


def circulating_problem(final_time: float = 2.0) -> ProblemData:
    """A lump of mass circulating the domain while diffusing away."""

    def pieces(pts, t):
        x, y = pts[:, 0], pts[:, 1]
        g = 10.0 - t
        G = (x * x - x) * (y * y - y)
        P = 2 * x - 0.5 * np.sin(np.pi * t / 2) - 1
        Q = 2 * y - 0.5 * np.cos(np.pi * t / 2) - 1
        a = 25.0 * g * (P * P + Q * Q - 3.0 / 200.0)
        S = expit(a)
        SP = S * expit(-a)          # sigma'(a), stable for large |a|
        return x, y, g, G, P, Q, a, S, SP

    def exact(pts, t):
        _, _, g, G, _, _, _, S, _ = pieces(pts, t)
        return g * G * S

    def exact_grad(pts, t):
        x, y, g, G, P, Q, _, S, SP = pieces(pts, t)
        Gx = (2 * x - 1) * (y * y - y)
        Gy = (x * x - x) * (2 * y - 1)
        ax = 100.0 * g * P
        ay = 100.0 * g * Q
        ux = g * (Gx * S + G * SP * ax)
        uy = g * (Gy * S + G * SP * ay)
        return np.stack([ux, uy], axis=1)

    def forcing(pts, t):
        x, y, g, G, P, Q, a, S, SP = pieces(pts, t)
        Gx = (2 * x - 1) * (y * y - y)
        Gy = (x * x - x) * (2 * y - 1)
        Gxx = 2 * (y * y - y)
        Gyy = 2 * (x * x - x)
        ax = 100.0 * g * P
        ay = 100.0 * g * Q
        axx = 200.0 * g
        Pt = -0.25 * np.pi * np.cos(np.pi * t / 2)
        Qt = 0.25 * np.pi * np.sin(np.pi * t / 2)
        at = -25.0 * (P * P + Q * Q - 3.0 / 200.0) \
            + 25.0 * g * (2 * P * Pt + 2 * Q * Qt)
        SPP = SP * (1.0 - 2.0 * S)  # sigma''(a)
        u_t = -G * S + g * G * SP * at
        uxx = g * (Gxx * S + 2 * Gx * SP * ax + G * (SPP * ax * ax + SP * axx))
        uyy = g * (Gyy * S + 2 * Gy * SP * ay + G * (SPP * ay * ay + SP * axx))
        return u_t - (uxx + uyy)

    return ProblemData(diffusion=1.0, reaction=0.0, forcing=forcing,
                       u0=lambda pts: exact(pts, 0.0),
                       final_time=final_time, exact=exact,
                       exact_grad=exact_grad, name="vem_circulating")


def hat_problem(final_time: float = 5.0, alpha: float = 0.01,
                r0: float = 0.15) -> ProblemData:
    """Expanding concentration u = g(t)(1 + tanh(-m(t)(r^2 - r0^2)))."""

    def pieces(pts, t):
        x, y = pts[:, 0], pts[:, 1]
        r2 = x * x + y * y
        m = 100.0 / (3.0 * t + 2.0)
        g = 10.0 / (t * t + 20.0)
        xi = -m * (r2 - r0 * r0)
        th = np.tanh(xi)
        sech2 = 1.0 - th * th
        return x, y, r2, m, g, xi, th, sech2

    def exact(pts, t):
        _, _, _, _, g, _, th, _ = pieces(pts, t)
        return g * (1.0 + th)

    def exact_grad(pts, t):
        x, y, _, m, g, _, _, sech2 = pieces(pts, t)
        coef = g * sech2 * (-2.0 * m)
        return np.stack([coef * x, coef * y], axis=1)

    def forcing(pts, t):
        x, y, r2, m, g, xi, th, sech2 = pieces(pts, t)
        gp = -20.0 * t / (t * t + 20.0) ** 2
        mp = -300.0 / (3.0 * t + 2.0) ** 2
        xi_t = -mp * (r2 - r0 * r0)
        u_t = gp * (1.0 + th) + g * sech2 * xi_t
        grad_xi_sq = 4.0 * m * m * r2
        lap = g * sech2 * (-2.0 * th * grad_xi_sq - 4.0 * m)
        return u_t - alpha * lap

    return ProblemData(diffusion=alpha, reaction=0.0, forcing=forcing,
                       u0=lambda pts: exact(pts, 0.0),
                       final_time=final_time, exact=exact,
                       exact_grad=exact_grad, dirichlet=exact,
                       name="fem_hat")


BENCHMARKS = {
    "vem_oscillating": oscillating_problem,
    "vem_layer": layer_problem,
    "vem_circulating": circulating_problem,
    "fem_hat": hat_problem,
}


def get_problem(name: str, final_time: float | None = None) -> ProblemData:
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}")
    if final_time is None:
        return BENCHMARKS[name]()
    return BENCHMARKS[name](final_time=final_time)
