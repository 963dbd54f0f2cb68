"""Fixed-time-step spatial adaptivity driven by elliptic L2 indicators."""

from dataclasses import dataclass, field

import numpy as np

from .mesh import coarsen_patches, refine_cells
from .vem import VemSpace


@dataclass
class MarkingConfig:
    """Marking thresholds (max-relative by default, or absolute) and the
    paper's adaptation periods."""

    refine_fraction: float = 0.5     # refine above this fraction of max
    coarsen_fraction: float = 0.05   # coarsen below this fraction of max
    refine_abs: float | None = None  # absolute thresholds override fractions
    coarsen_abs: float | None = None
    refine_period: int = 5
    coarsen_period: int = 10
    max_depth: int = 6
    max_cells: int = 20000
    rho: float = 0.05

    def __post_init__(self):
        if not self.coarsen_fraction < self.refine_fraction:
            raise ValueError("coarsen threshold must lie below refine threshold")
        if self.refine_abs is not None and self.coarsen_abs is not None \
                and not self.coarsen_abs < self.refine_abs:
            raise ValueError("coarsen threshold must lie below refine threshold")
        if self.refine_period < 1 or self.coarsen_period < 1:
            raise ValueError("adaptation periods must be >= 1")

    def refine_threshold(self, top: float) -> float:
        return self.refine_abs if self.refine_abs is not None \
            else self.refine_fraction * top

    def coarsen_threshold(self, top: float) -> float:
        return self.coarsen_abs if self.coarsen_abs is not None \
            else self.coarsen_fraction * top


@dataclass
class AdaptLog:
    step: int
    cells_before: int
    cells_after: int
    n_refined: int = 0
    n_merged_groups: int = 0
    merges_rejected: int = 0
    budget_hit: bool = False
    changed: bool = False


def adapt_step(space: VemSpace, indicators: np.ndarray, step: int,
               config: MarkingConfig):
    """Refine/coarsen by indicator thresholds; returns (new space, log).

    Refinement marks are applied first; coarsening only merges cells left
    untouched by the refinement.  The space is rebuilt once on the final
    mesh; the caller moves the solution through the scheme's transfer.
    """
    mesh = space.mesh
    forest = mesh.forest
    log = AdaptLog(step=step, cells_before=mesh.n_cells, cells_after=mesh.n_cells)
    do_refine = step % config.refine_period == 0
    do_coarsen = step % config.coarsen_period == 0
    if not (do_refine or do_coarsen) or mesh.n_cells == 0:
        return space, log
    top = float(np.max(indicators))
    if top <= 0:
        return space, log

    refine_marks: set[int] = set()
    if do_refine:
        threshold = config.refine_threshold(top)
        candidates = [c for c in range(mesh.n_cells)
                      if indicators[c] > threshold
                      and forest.nodes[mesh.cell_nodes[c]].depth < config.max_depth]
        # an agglomerate split restores its members, a primitive split adds
        # one ring-vertex quad per vertex: budget check with worst case
        candidates.sort(key=lambda c: -indicators[c])
        projected = mesh.n_cells
        for c in candidates:
            node = forest.nodes[mesh.cell_nodes[c]]
            extra = len(node.merge_children) - 1 if node.merge_children \
                else len(mesh.cells[c]) - 1
            if projected + extra > config.max_cells:
                log.budget_hit = True
                break
            projected += extra
            refine_marks.add(c)

    current = mesh
    if refine_marks:
        current = refine_cells(mesh, forest, refine_marks)
        log.n_refined = len(refine_marks)

    if do_coarsen:
        old_cell_of_node = {n: c for c, n in enumerate(mesh.cell_nodes)}
        low = config.coarsen_threshold(top)
        coarsen_marks = []
        for c_new, node in enumerate(current.cell_nodes):
            c_old = old_cell_of_node.get(node)
            if c_old is None:
                continue  # freshly refined
            if indicators[c_old] < low:
                coarsen_marks.append(c_new)
        if coarsen_marks:
            before = current.n_cells
            current, rejected = coarsen_patches(current, forest, coarsen_marks,
                                                rho=config.rho)
            log.merges_rejected = len(rejected)
            log.n_merged_groups = max(0, before - current.n_cells)

    if current is mesh:
        return space, log
    log.changed = True
    log.cells_after = current.n_cells
    new_space = VemSpace(current, space.k, space.problem, c_stab=space.c_stab)
    return new_space, log
