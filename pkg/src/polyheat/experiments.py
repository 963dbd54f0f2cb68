"""Batch experiment runner: benchmark configs, the time loop with estimators,
deterministic CSV output and convergence sequences."""

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .adapt import AdaptLog, MarkingConfig, adapt_step
from .benchmarks import get_problem
from .errors import ConfigError
from .estimators import (AccumulationState, ErrorAccumulator,
                         EstimatorBreakdown, EstimatorConstants,
                         convergence_rate, data_estimators,
                         elliptic_estimators, initial_error_seed,
                         mesh_transfer_estimator, space_estimator_global,
                         space_estimator_local, time_estimator,
                         true_error_step)
from .fem import FemSpace, MovingMeshMap, hat_benchmark_warp, warp_mesh
from .mesh import build_uniform_quad_mesh, mesh_diff, overlay_cells
from .scheme import advance, initial_state
from .vem import VemSpace

DEFAULT_FINAL_TIMES = {
    "vem_oscillating": 1.0,
    "vem_layer": 1.0,
    "vem_circulating": 2.0,
    "fem_hat": 5.0,
}


@dataclass
class ExperimentConfig:
    """One run of one benchmark at one resolution."""

    benchmark: str = "vem_oscillating"
    backend: str = "vem"              # vem | fem
    k: int = 1
    mesh_index: int = 3               # i: 2^i (VEM) or 2^(i+2) (FEM) per side
    initial_n: int | None = None      # overrides the index-based resolution
    tau_rule: str = "h"               # h | h2 | fixed
    tau_value: float = 0.05
    final_time: float | None = None
    lam: float = 0.95
    transfer: str | None = None       # default: local (VEM) / elliptic (FEM)
    adaptive: bool = False
    refine_fraction: float = 0.5
    coarsen_fraction: float = 0.05
    refine_period: int = 5
    coarsen_period: int = 10
    max_depth: int = 6
    max_cells: int = 20000
    warp_amplitude: float = 0.5
    seed: int = 0
    save_meshes: bool = False
    out: str = "run.csv"

    def resolved(self) -> "ExperimentConfig":
        if self.benchmark == "fem_hat":
            self.backend = "fem"
        if self.final_time is None:
            self.final_time = DEFAULT_FINAL_TIMES.get(self.benchmark, 1.0)
        if self.transfer is None:
            self.transfer = "elliptic" if self.backend == "fem" else "local"
        if self.tau_rule not in ("h", "h2", "fixed"):
            raise ConfigError(f"unknown tau rule {self.tau_rule!r}")
        if self.backend not in ("vem", "fem"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        from .benchmarks import BENCHMARKS
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        return self

    @property
    def mesh_n(self) -> int:
        if self.initial_n is not None:
            return self.initial_n
        if self.benchmark == "fem_hat":
            return 2 ** (self.mesh_index + 2)
        if self.adaptive:
            return 20  # paper: initial mesh of 400 square elements
        return 2 ** self.mesh_index

    @property
    def h(self) -> float:
        return np.sqrt(2.0) / self.mesh_n

    @property
    def tau(self) -> float:
        if self.tau_rule == "h":
            return self.h
        if self.tau_rule == "h2":
            return self.h ** 2
        return self.tau_value


def parse_config(text: str) -> ExperimentConfig:
    """Plain 'key = value' lines, '#' comments."""
    values: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return config_from_dict(values)


def config_from_dict(values: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    casts = {f.name: f.type for f in fields(ExperimentConfig)}
    for key, val in values.items():
        if key not in casts:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool) or casts[key] == "bool":
            parsed = str(val).strip().lower() in ("1", "true", "yes", "on")
        elif key in ("initial_n", "final_time", "transfer"):
            if str(val).strip().lower() in ("", "none"):
                parsed = None
            elif key == "initial_n":
                parsed = int(val)
            elif key == "final_time":
                parsed = float(val)
            else:
                parsed = str(val)
        elif isinstance(current, int):
            parsed = int(val)
        elif isinstance(current, float):
            parsed = float(val)
        else:
            parsed = str(val)
        setattr(cfg, key, parsed)
    return cfg.resolved()


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    meshes: list = field(default_factory=list)   # (t, POLYMESH text) snapshots
    err_linf_l2: float = float("nan")
    est_linf_l2: float = 0.0
    err_l2_h1: float = float("nan")
    est_l2_h1: float = 0.0

    @property
    def eff_linf_l2(self) -> float:
        return self.est_linf_l2 / self.err_linf_l2 if self.err_linf_l2 > 0 \
            else float("nan")

    @property
    def eff_l2_h1(self) -> float:
        return self.est_l2_h1 / self.err_l2_h1 if self.err_l2_h1 > 0 \
            else float("nan")


CSV_COLUMNS = ["t", "n_cells", "n_dofs", "err_LinfL2", "est_LinfL2",
               "eff_LinfL2", "err_L2H1", "est_L2H1", "eff_L2H1",
               "eta_ellip_L2", "eta_ellip_H1", "eta_space", "eta_time",
               "eta_dataT", "eta_dataS", "eta_mesh", "cells_before",
               "cells_after", "merges_rejected"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and np.isnan(x):
        return ""
    return format(float(x), ".12g")


def run(config: ExperimentConfig, quiet: bool = True,
        progress=None) -> RunResult:
    """Run one experiment, returning rows and final summary values."""
    config = config.resolved()
    problem = get_problem(config.benchmark, final_time=config.final_time)
    constants = EstimatorConstants(lam=config.lam)

    mmap = None
    if config.backend == "fem":
        mmap = MovingMeshMap(config.mesh_n,
                             hat_benchmark_warp(amplitude=config.warp_amplitude),
                             amplitude=config.warp_amplitude)
        space = FemSpace(warp_mesh(mmap, 0.0), problem)
    else:
        mesh = build_uniform_quad_mesh(config.mesh_n)
        space = VemSpace(mesh, config.k, problem, c_stab=constants.c_stab)

    marking = MarkingConfig(
        refine_fraction=config.refine_fraction,
        coarsen_fraction=config.coarsen_fraction,
        refine_period=config.refine_period,
        coarsen_period=config.coarsen_period,
        max_depth=config.max_depth,
        max_cells=config.max_cells)

    acc = AccumulationState(lam=config.lam, c_equiv=problem.c_equiv,
                            c_pf=problem.c_pf)
    err_acc = ErrorAccumulator() if problem.exact is not None else None

    state = initial_state(space, problem)
    if config.save_meshes:
        result_meshes_pending = [(0.0, space.mesh.to_text())]
    else:
        result_meshes_pending = []
    acc.e0 = initial_error_seed(state, problem)
    l2_0, h1_0, indicators = elliptic_estimators(state, constants)
    bd0 = EstimatorBreakdown(n=0, t=0.0, tau=0.0, eta_ellip_l2=l2_0,
                             eta_ellip_h1=h1_0, cell_indicators=indicators)
    acc.push(bd0)
    result = RunResult(config=config)
    result.meshes.extend(result_meshes_pending)
    result.rows.append(_make_row(state, bd0, acc, err_acc, None))

    T = problem.final_time
    tau0 = config.tau
    n = 0
    t = 0.0
    while t < T - 1e-12:
        n += 1
        tau = min(tau0, T - t)
        prev_space = state.space
        adapt_log = None
        if config.backend == "fem":
            new_space = FemSpace(warp_mesh(mmap, t + tau), problem)
        elif config.adaptive:
            new_space, adapt_log = adapt_step(state.space, indicators, n, marking)
        else:
            new_space = state.space
        prev_state = state
        state = advance(prev_state, new_space, config.transfer, tau, problem)
        t = state.t

        mesh_changed = new_space is not prev_space and config.backend == "vem"
        diff = pieces = None
        if mesh_changed:
            diff = mesh_diff(new_space.mesh, prev_space.mesh)
            pieces = overlay_cells(new_space.mesh, prev_space.mesh)
        elif config.backend == "fem":
            pieces = None

        l2_n, h1_n, indicators = elliptic_estimators(state, constants)
        eta_mesh = mesh_transfer_estimator(state, prev_state, pieces, constants)
        if config.backend == "fem":
            eta_space = space_estimator_global(state, prev_state, constants)
        else:
            eta_space = space_estimator_local(state, prev_state, diff, pieces,
                                              constants, eta_mesh)
        eta_time = time_estimator(state, prev_state, pieces, constants)
        theta_t, theta_s = data_estimators(state, constants)
        bd = EstimatorBreakdown(n=n, t=t, tau=tau, eta_ellip_l2=l2_n,
                                eta_ellip_h1=h1_n, eta_space=eta_space,
                                eta_time=eta_time, eta_mesh=eta_mesh,
                                theta_s=theta_s, theta_t_samples=theta_t,
                                cell_indicators=indicators)
        acc.push(bd)
        if config.save_meshes and adapt_log is not None and adapt_log.changed:
            result.meshes.append((t, new_space.mesh.to_text()))
        if err_acc is not None:
            true_error_step(state, prev_state, pieces, problem, err_acc)
        result.rows.append(_make_row(state, bd, acc, err_acc, adapt_log))
        if progress is not None:
            progress(n, t, state)
        # free cached residual machinery of the superseded state
        prev_state.extra.clear()

    result.est_linf_l2 = acc.total_linf_l2()
    result.est_l2_h1 = acc.total_l2h1()
    if err_acc is not None:
        result.err_linf_l2 = err_acc.error_linf()
        result.err_l2_h1 = err_acc.error_l2h1()
    if not quiet:
        print(f"{config.benchmark}: est_LinfL2={result.est_linf_l2:.4g} "
              f"err_LinfL2={result.err_linf_l2:.4g} "
              f"eff={result.eff_linf_l2:.3g}")
    return result


def _make_row(state, bd: EstimatorBreakdown, acc: AccumulationState,
              err_acc, adapt_log: AdaptLog | None) -> dict:
    row = {
        "t": state.t,
        "n_cells": state.space.mesh.n_cells,
        "n_dofs": int(state.space.interior.sum()),
        "err_LinfL2": err_acc.error_linf() if err_acc else None,
        "est_LinfL2": acc.total_linf_l2(),
        "eff_LinfL2": None,
        "err_L2H1": err_acc.error_l2h1() if err_acc else None,
        "est_L2H1": acc.total_l2h1(),
        "eff_L2H1": None,
        "eta_ellip_L2": bd.eta_ellip_l2,
        "eta_ellip_H1": bd.eta_ellip_h1,
        "eta_space": bd.eta_space,
        "eta_time": bd.eta_time,
        "eta_dataT": bd.theta_t_linf,
        "eta_dataS": bd.theta_s,
        "eta_mesh": bd.eta_mesh,
        "cells_before": adapt_log.cells_before if adapt_log else None,
        "cells_after": adapt_log.cells_after if adapt_log else None,
        "merges_rejected": adapt_log.merges_rejected if adapt_log else None,
    }
    if err_acc is not None and row["err_LinfL2"]:
        row["eff_LinfL2"] = row["est_LinfL2"] / row["err_LinfL2"]
    if err_acc is not None and row["err_L2H1"]:
        row["eff_L2H1"] = row["est_L2H1"] / row["err_L2H1"]
    return row


def write_csv(result: RunResult, path: str) -> None:
    lines = [f"# polyheat run {result.config.benchmark} "
             f"written {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    lines.append(",".join(CSV_COLUMNS))
    for row in result.rows:
        lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def run_convergence(base: ExperimentConfig, indices) -> dict:
    """Run a sequence of mesh indices and report final-pair rates."""
    results = {}
    for i in indices:
        cfg = ExperimentConfig(**{f.name: getattr(base, f.name)
                                  for f in fields(ExperimentConfig)})
        cfg.mesh_index = i
        cfg.initial_n = None
        results[i] = run(cfg)
    i_fine = max(indices)
    i_coarse = sorted(indices)[-2]
    fine, coarse = results[i_fine], results[i_coarse]
    rates = {
        "err_LinfL2": convergence_rate(coarse.err_linf_l2, fine.err_linf_l2,
                                       coarse.config.h, fine.config.h),
        "est_LinfL2": convergence_rate(coarse.est_linf_l2, fine.est_linf_l2,
                                       coarse.config.h, fine.config.h),
        "err_L2H1": convergence_rate(coarse.err_l2_h1, fine.err_l2_h1,
                                     coarse.config.h, fine.config.h),
        "est_L2H1": convergence_rate(coarse.est_l2_h1, fine.est_l2_h1,
                                     coarse.config.h, fine.config.h),
    }
    return {"results": results, "rates": rates}
