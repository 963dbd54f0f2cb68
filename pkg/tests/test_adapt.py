"""Marking-driven refinement/coarsening driver."""

import numpy as np
import pytest

from conftest import make_problem
from polyheat.adapt import MarkingConfig, adapt_step
from polyheat.mesh import build_uniform_quad_mesh, mesh_diff
from polyheat.vem import VemSpace


def make_space(n=4):
    problem = make_problem(1.0, 0.0)
    return VemSpace(build_uniform_quad_mesh(n), 1, problem)


def test_invalid_config():
    with pytest.raises(ValueError):
        MarkingConfig(refine_fraction=0.1, coarsen_fraction=0.5)
    with pytest.raises(ValueError):
        MarkingConfig(refine_period=0)


def test_all_low_indicators_merge():
    space = make_space(4)
    ind = np.full(space.mesh.n_cells, 1e-6)
    ind[0] = 1.0  # one high cell so thresholds are meaningful
    cfg = MarkingConfig(refine_fraction=2.0, coarsen_fraction=0.5,
                        refine_period=1, coarsen_period=1)
    # refine_fraction 2.0 marks nothing; all low cells merge
    new_space, log = adapt_step(space, ind, 10, cfg)
    assert log.changed
    assert new_space.mesh.n_cells < space.mesh.n_cells


def test_between_thresholds_noop():
    # absolute-threshold mode: uniform indicators strictly between the two
    space = make_space(3)
    ind = np.full(space.mesh.n_cells, 0.3)
    cfg = MarkingConfig(refine_abs=0.5, coarsen_abs=0.05,
                        refine_period=1, coarsen_period=1)
    new_space, log = adapt_step(space, ind, 5, cfg)
    assert new_space is space
    assert not log.changed


def test_off_period_noop():
    space = make_space(3)
    ind = np.linspace(0, 1, space.mesh.n_cells)
    cfg = MarkingConfig(refine_period=5, coarsen_period=10)
    new_space, log = adapt_step(space, ind, 3, cfg)
    assert new_space is space


def test_refine_then_coarsen_produces_related_mesh():
    space = make_space(4)
    rng = np.random.default_rng(0)
    ind = rng.uniform(0, 1, space.mesh.n_cells)
    cfg = MarkingConfig(refine_period=1, coarsen_period=1)
    new_space, log = adapt_step(space, ind, 1, cfg)
    assert log.changed
    diff = mesh_diff(new_space.mesh, space.mesh)
    assert not diff.is_empty
    assert new_space.mesh.total_area() == pytest.approx(1.0, abs=1e-12)


def test_budget_guard():
    space = make_space(4)
    ind = np.linspace(0.6, 1.0, space.mesh.n_cells)
    cfg = MarkingConfig(refine_fraction=0.5, coarsen_fraction=0.05,
                        refine_period=1, coarsen_period=1,
                        max_cells=space.mesh.n_cells + 7)
    new_space, log = adapt_step(space, ind, 1, cfg)
    assert log.budget_hit
    assert new_space.mesh.n_cells <= cfg.max_cells


def test_depth_guard():
    space = make_space(2)
    cfg = MarkingConfig(refine_period=1, coarsen_period=10, max_depth=1)
    for step in range(1, 4):
        ind = np.ones(space.mesh.n_cells)
        space, log = adapt_step(space, ind, step, cfg)
    forest = space.mesh.forest
    depths = [forest.nodes[n].depth for n in space.mesh.cell_nodes]
    assert max(depths) <= 1
