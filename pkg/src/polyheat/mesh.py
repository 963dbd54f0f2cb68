"""Polygonal meshes with an adaptation forest.

Cells keep their identity across mesh generations through forest nodes:
refinement records split children, agglomeration records merge children.
This makes mesh diffs, common coarsenings and common refinements exact
set operations instead of geometric searches.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InternalError, MarkUnknownCell, UnrelatedMeshes
from .geometry import (kernel_radius, point_in_polygon, point_on_segment,
                       polygon_area, polygon_centroid, polygon_diameter)
from .quadrature import QuadratureRule, polygon_quadrature

_COORD_KEY_DIGITS = 12


def _coord_key(x: float, y: float) -> tuple[int, int]:
    return (round(x * 10 ** _COORD_KEY_DIGITS), round(y * 10 ** _COORD_KEY_DIGITS))


@dataclass
class ForestNode:
    """One cell ever created; links record splits and agglomerations."""

    ring: tuple[int, ...]          # ccw vertex ids at creation time
    depth: int = 0
    split_parent: int | None = None
    split_children: tuple[int, ...] = ()
    merge_parents: list[int] = field(default_factory=list)
    merge_children: tuple[int, ...] = ()


class AdaptForest:
    """Shared vertex table plus the node history of all mesh generations."""

    def __init__(self):
        self._coords: list[tuple[float, float]] = []
        self._coord_index: dict[tuple[int, int], int] = {}
        self.nodes: list[ForestNode] = []
        self._merge_index: dict[frozenset, int] = {}
        self.next_generation = 0

    # -- vertices -----------------------------------------------------------
    def add_vertex(self, x: float, y: float) -> int:
        key = _coord_key(x, y)
        vid = self._coord_index.get(key)
        if vid is None:
            vid = len(self._coords)
            self._coords.append((float(x), float(y)))
            self._coord_index[key] = vid
        return vid

    @property
    def n_vertices(self) -> int:
        return len(self._coords)

    def coords(self) -> np.ndarray:
        return np.asarray(self._coords)

    # -- nodes --------------------------------------------------------------
    def new_node(self, ring: tuple[int, ...], depth: int = 0, **links) -> int:
        nid = len(self.nodes)
        self.nodes.append(ForestNode(ring=tuple(ring), depth=depth, **links))
        return nid

    def find_agglomerate(self, members: frozenset) -> int | None:
        return self._merge_index.get(members)

    def register_agglomerate(self, members: frozenset, node_id: int) -> None:
        self._merge_index[members] = node_id

    def node_polygon(self, node_id: int) -> np.ndarray:
        return self.coords()[list(self.nodes[node_id].ring)]

    def up_closure(self, node_id: int) -> set:
        """Nodes reachable through split/merge parent links (regions >= this)."""
        seen: set[int] = set()
        stack = [node_id]
        while stack:
            nid = stack.pop()
            node = self.nodes[nid]
            ups = list(node.merge_parents)
            if node.split_parent is not None:
                ups.append(node.split_parent)
            for parent in ups:
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        return seen

    def covering_cell(self, node_id: int, cell_of_node: dict) -> int | None:
        """Cell (in a mesh given as node->cell map) whose region covers the node.

        Covers the agglomerate case where containment is only visible through
        the merge children.
        """
        if node_id in cell_of_node:
            return cell_of_node[node_id]
        for anc in self.up_closure(node_id):
            if anc in cell_of_node:
                return cell_of_node[anc]
        node = self.nodes[node_id]
        if node.merge_children:
            covers = {self.covering_cell(c, cell_of_node) for c in node.merge_children}
            if len(covers) == 1 and None not in covers:
                return covers.pop()
        return None


@dataclass
class MeshDiff:
    """Cells/edges present in exactly one of two related meshes."""

    cells_only_in_new: list[int]
    cells_only_in_old: list[int]
    edges_only_in_old: list[int]
    hhat_cells_old: dict[int, float] = field(default_factory=dict)
    hhat_edges_old: dict[int, float] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not (self.cells_only_in_new or self.cells_only_in_old
                    or self.edges_only_in_old)


class PolyMesh:
    """Immutable polygonal mesh generation.

    Cells are ccw vertex-id rings; hanging vertices are ordinary ring
    vertices.  Edges are derived deterministically from the cell list.
    """

    def __init__(self, vertices: np.ndarray, cells: list, forest: AdaptForest | None = None,
                 cell_nodes: list | None = None, generation: int = 0):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = [np.asarray(c, dtype=int) for c in cells]
        self.forest = forest
        self.cell_nodes = list(cell_nodes) if cell_nodes is not None else [None] * len(cells)
        self.generation = generation
        self._build_edges()
        self._build_metrics()
        self._quad_cache: dict[tuple[int, int], QuadratureRule] = {}

    def _build_edges(self) -> None:
        edge_index: dict[tuple[int, int], int] = {}
        ev, left, right = [], [], []
        cell_edges = []
        for ci, ring in enumerate(self.cells):
            ids = []
            n = len(ring)
            for i in range(n):
                a, b = int(ring[i]), int(ring[(i + 1) % n])
                if (b, a) in edge_index:
                    ei = edge_index[(b, a)]
                    if right[ei] is not None:
                        raise InternalError(f"edge {(a, b)} has more than two cells")
                    right[ei] = ci
                elif (a, b) in edge_index:
                    raise InternalError(f"edge {(a, b)} traversed twice in same direction")
                else:
                    ei = len(ev)
                    edge_index[(a, b)] = ei
                    ev.append((a, b))
                    left.append(ci)
                    right.append(None)
                ids.append(ei)
            cell_edges.append(np.asarray(ids, dtype=int))
        self.edge_vertices = np.asarray(ev, dtype=int) if ev else np.zeros((0, 2), int)
        self.edge_left = np.asarray(left, dtype=int) if left else np.zeros(0, int)
        self.edge_right = np.asarray([-1 if r is None else r for r in right], dtype=int) \
            if right else np.zeros(0, int)
        self.cell_edges = cell_edges
        self.edge_is_boundary = self.edge_right < 0
        self._edge_key_index = {frozenset((int(a), int(b))): i
                                for i, (a, b) in enumerate(self.edge_vertices)}

    def _build_metrics(self) -> None:
        n = self.n_cells
        self.h_cell = np.empty(n)
        self.cell_area = np.empty(n)
        self._centroids = np.empty((n, 2))
        by_len: dict[int, list[int]] = {}
        for c, ring in enumerate(self.cells):
            by_len.setdefault(len(ring), []).append(c)
        for ln, idx in by_len.items():
            idx = np.asarray(idx)
            rings = np.stack([self.cells[c] for c in idx])
            pts = self.vertices[rings]                      # (g, ln, 2)
            nxt = np.roll(pts, -1, axis=1)
            cross = pts[..., 0] * nxt[..., 1] - nxt[..., 0] * pts[..., 1]
            area = 0.5 * cross.sum(axis=1)
            self.cell_area[idx] = area
            self._centroids[idx, 0] = ((pts[..., 0] + nxt[..., 0]) * cross).sum(axis=1) \
                / (6.0 * area)
            self._centroids[idx, 1] = ((pts[..., 1] + nxt[..., 1]) * cross).sum(axis=1) \
                / (6.0 * area)
            d = pts[:, :, None, :] - pts[:, None, :, :]
            self.h_cell[idx] = np.sqrt((d * d).sum(axis=3)).max(axis=(1, 2))
        if np.any(self.cell_area <= 0):
            raise InternalError("cell with non-positive area (ring not ccw?)")
        d = self.vertices[self.edge_vertices[:, 0]] - self.vertices[self.edge_vertices[:, 1]]
        self.h_edge = np.sqrt((d * d).sum(axis=1)) if len(d) else np.zeros(0)

    # -- basic queries ------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edge_vertices)

    def cell_polygon(self, c: int) -> np.ndarray:
        return self.vertices[self.cells[c]]

    def cell_centroid(self, c: int) -> np.ndarray:
        return self._centroids[c]

    def cell_quadrature(self, c: int, degree: int) -> QuadratureRule:
        key = (c, degree)
        rule = self._quad_cache.get(key)
        if rule is None:
            rule = polygon_quadrature(self.cell_polygon(c), degree)
            self._quad_cache[key] = rule
        return rule

    def edge_key(self, e: int) -> frozenset:
        a, b = self.edge_vertices[e]
        return frozenset((int(a), int(b)))

    def boundary_vertices(self) -> set:
        out = set()
        for e in np.nonzero(self.edge_is_boundary)[0]:
            out.update(int(v) for v in self.edge_vertices[e])
        return out

    def total_area(self) -> float:
        return float(self.cell_area.sum())

    def locate_cell(self, point: np.ndarray) -> int:
        """Brute-force point location; meshes here stay desk-sized."""
        best, best_d = -1, np.inf
        for c in range(self.n_cells):
            d = np.linalg.norm(self.cell_centroid(c) - point)
            if d < best_d:
                best, best_d = c, d
        if point_in_polygon(point, self.cell_polygon(best)):
            return best
        for c in range(self.n_cells):
            if point_in_polygon(point, self.cell_polygon(c)):
                return c
        raise InternalError(f"point {point} not in any cell")

    # -- regularity ---------------------------------------------------------
    def check_regularity(self, rho: float = 0.05) -> list[str]:
        """Return a list of violated invariants (empty when regular)."""
        problems = []
        for c in range(self.n_cells):
            ring = self.cells[c]
            if len(set(int(v) for v in ring)) != len(ring):
                problems.append(f"cell {c}: repeated vertex in ring")
            for e in self.cell_edges[c]:
                if self.h_edge[e] < rho * self.h_cell[c] * (1 - 1e-12):
                    problems.append(f"cell {c}: edge {e} shorter than rho*h_E")
            kr = kernel_radius(self.cell_polygon(c))
            if kr < rho * self.h_cell[c] - 1e-10 * self.h_cell[c]:
                problems.append(f"cell {c}: not star-shaped for rho={rho}")
        return problems

    # -- serialization ------------------------------------------------------
    def to_text(self) -> str:
        lines = ["POLYMESH 1", str(self.n_vertices)]
        for x, y in self.vertices:
            lines.append(f"{x:.17g} {y:.17g}")
        lines.append(str(self.n_cells))
        for ring in self.cells:
            lines.append(" ".join(str(int(v)) for v in ring))
        lines.append(str(self.n_edges))
        for e in range(self.n_edges):
            a, b = self.edge_vertices[e]
            lines.append(f"{a} {b} {self.edge_left[e]} {self.edge_right[e]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PolyMesh":
        lines = [ln for ln in text.splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
        if lines[0].strip() != "POLYMESH 1":
            raise InternalError("not a POLYMESH 1 file")
        pos = 1
        nv = int(lines[pos]); pos += 1
        verts = np.array([[float(t) for t in lines[pos + i].split()] for i in range(nv)])
        pos += nv
        nc = int(lines[pos]); pos += 1
        cells = [np.array([int(t) for t in lines[pos + i].split()]) for i in range(nc)]
        return cls(verts, cells)


# ---------------------------------------------------------------------------
# mesh construction and adaptation
# ---------------------------------------------------------------------------

def build_uniform_quad_mesh(n: int, forest: AdaptForest | None = None) -> PolyMesh:
    """n x n axis-aligned squares on the unit square."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if forest is None:
        forest = AdaptForest()
    vid = np.empty((n + 1, n + 1), dtype=int)
    for j in range(n + 1):
        for i in range(n + 1):
            vid[i, j] = forest.add_vertex(i / n, j / n)
    cells, nodes = [], []
    for j in range(n):
        for i in range(n):
            ring = (int(vid[i, j]), int(vid[i + 1, j]),
                    int(vid[i + 1, j + 1]), int(vid[i, j + 1]))
            cells.append(np.asarray(ring))
            nodes.append(forest.new_node(ring))
    gen = forest.next_generation
    forest.next_generation += 1
    return PolyMesh(forest.coords(), cells, forest, nodes, generation=gen)


def _insert_split_vertices(ring: list[int], split_map: dict) -> list[int]:
    out: list[int] = []
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        out.append(a)
        mid = split_map.get(frozenset((a, b)))
        if mid is not None:
            out.append(mid)
    return out


def _conform_ring(ring: list[int], candidates, coords) -> list[int]:
    """Insert candidate vertices lying strictly inside ring segments."""
    out: list[int] = []
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        out.append(a)
        pa, pb = coords[a], coords[b]
        hits = []
        for v in candidates:
            if v == a or v == b:
                continue
            if point_on_segment(coords[v], pa, pb, 1e-10):
                from .geometry import segment_param
                t = segment_param(coords[v], pa, pb)
                if 1e-10 < t < 1 - 1e-10:
                    hits.append((t, v))
        out.extend(v for _, v in sorted(hits))
    return out


def refine_cells(mesh: PolyMesh, forest: AdaptForest, marks) -> PolyMesh:
    """Split marked cells; agglomerates split back into their members.

    Primitive cells are split by connecting the centroid to all edge
    midpoints, producing one quad per ring vertex.  Hanging vertices appear
    as ordinary vertices on unmarked neighbours.
    """
    if forest is not mesh.forest:
        raise UnrelatedMeshes("mesh does not belong to the given forest")
    marks = sorted(set(int(m) for m in marks))
    for m in marks:
        if m < 0 or m >= mesh.n_cells:
            raise MarkUnknownCell(f"cell id {m} not in mesh")
    marked = set(marks)

    split_map: dict[frozenset, int] = {}  # vertex pair -> midpoint vertex id
    new_cells: list[list[int]] = []
    new_nodes: list[int] = []

    for c in range(mesh.n_cells):
        ring = [int(v) for v in mesh.cells[c]]
        node_id = mesh.cell_nodes[c]
        if c not in marked:
            new_cells.append(ring)
            new_nodes.append(node_id)
            continue
        node = forest.nodes[node_id]
        if node.merge_children:
            # undo the agglomeration: members keep their identities, but
            # their creation rings may miss hanging vertices gained since
            # (visible on the agglomerate's current mesh ring)
            child_rings = [list(forest.nodes[child].ring)
                           for child in node.merge_children]
            candidates = set(ring).union(*[set(r) for r in child_rings])
            coords = forest.coords()
            for child, child_ring in zip(node.merge_children, child_rings):
                new_cells.append(_conform_ring(child_ring, candidates, coords))
                new_nodes.append(child)
            continue
        coords = mesh.vertices[ring]
        centroid = polygon_centroid(coords)
        cen_id = forest.add_vertex(*centroid)
        nv = len(ring)
        mids = []
        for i in range(nv):
            a, b = ring[i], ring[(i + 1) % nv]
            key = frozenset((a, b))
            mid = split_map.get(key)
            if mid is None:
                pa, pb = mesh.vertices[a], mesh.vertices[b]
                mid = forest.add_vertex(*(0.5 * (pa + pb)))
                split_map[key] = mid
            mids.append(mid)
        children = []
        for i in range(nv):
            child_ring = (mids[i - 1], ring[i], mids[i], cen_id)
            children.append(forest.new_node(child_ring, depth=node.depth + 1,
                                            split_parent=node_id))
        forest.nodes[node_id].split_children = tuple(children)
        for child in children:
            new_cells.append(list(forest.nodes[child].ring))
            new_nodes.append(child)

    if split_map:
        new_cells = [_insert_split_vertices(r, split_map) for r in new_cells]

    gen = forest.next_generation
    forest.next_generation += 1
    return PolyMesh(forest.coords(), new_cells, forest, new_nodes, generation=gen)


def _trace_boundary(mesh: PolyMesh, component) -> list[int] | None:
    """Outer ccw ring of an edge-connected cell group, or None if not simple."""
    members = set(component)
    succ: dict[int, int] = {}
    for c in component:
        ring = [int(v) for v in mesh.cells[c]]
        for i, e in enumerate(mesh.cell_edges[c]):
            other = mesh.edge_right[e] if mesh.edge_left[e] == c else mesh.edge_left[e]
            if other in members:
                continue
            a, b = ring[i], ring[(i + 1) % len(ring)]
            if a in succ:
                return None  # boundary visits a vertex twice: pinched or holed
            succ[a] = b
    if not succ:
        return None
    start = min(succ)
    ring_out = [start]
    cur = succ[start]
    while cur != start:
        ring_out.append(cur)
        cur = succ.get(cur)
        if cur is None or len(ring_out) > len(succ):
            return None
    if len(ring_out) != len(succ):
        return None  # more than one loop
    return ring_out


def coarsen_patches(mesh: PolyMesh, forest: AdaptForest, marks,
                    rho: float = 0.05) -> tuple[PolyMesh, list[list[int]]]:
    """Agglomerate edge-connected groups of marked cells.

    Groups failing the star-shapedness check (or tracing to a non-simple
    boundary) are left unmerged and reported in the second return value.
    Single marked cells with no marked neighbour are untouched.
    """
    if forest is not mesh.forest:
        raise UnrelatedMeshes("mesh does not belong to the given forest")
    marks = sorted(set(int(m) for m in marks))
    for m in marks:
        if m < 0 or m >= mesh.n_cells:
            raise MarkUnknownCell(f"cell id {m} not in mesh")
    marked = set(marks)

    parent = {m: m for m in marks}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in range(mesh.n_edges):
        le, ri = int(mesh.edge_left[e]), int(mesh.edge_right[e])
        if ri >= 0 and le in marked and ri in marked:
            parent[find(le)] = find(ri)

    groups: dict[int, list[int]] = {}
    for m in marks:
        groups.setdefault(find(m), []).append(m)
    components = sorted((sorted(g) for g in groups.values() if len(g) >= 2),
                        key=lambda g: g[0])

    rejected: list[list[int]] = []
    merge_at: dict[int, tuple[list[int], int]] = {}  # first member -> (ring, node)
    absorbed: set[int] = set()
    for comp in components:
        ring = _trace_boundary(mesh, comp)
        if ring is None:
            rejected.append(comp)
            continue
        coords = mesh.vertices[ring]
        h = polygon_diameter(coords)
        if kernel_radius(coords) < rho * h - 1e-10 * h:
            rejected.append(comp)
            continue
        member_nodes = frozenset(mesh.cell_nodes[c] for c in comp)
        node_id = forest.find_agglomerate(member_nodes)
        if node_id is None:
            # re-coarsening a previously split patch restores the parent
            sp = forest.nodes[mesh.cell_nodes[comp[0]]].split_parent
            if sp is not None and \
                    frozenset(forest.nodes[sp].split_children) == member_nodes:
                node_id = sp
            else:
                node_id = forest.new_node(
                    tuple(ring),
                    depth=min(forest.nodes[n].depth for n in member_nodes),
                    merge_children=tuple(sorted(member_nodes)))
                for n in member_nodes:
                    forest.nodes[n].merge_parents.append(node_id)
            forest.register_agglomerate(member_nodes, node_id)
        merge_at[comp[0]] = (ring, node_id)
        absorbed.update(comp[1:])

    new_cells, new_nodes = [], []
    for c in range(mesh.n_cells):
        if c in absorbed:
            continue
        if c in merge_at:
            ring, node_id = merge_at[c]
            new_cells.append(ring)
            new_nodes.append(node_id)
        else:
            new_cells.append([int(v) for v in mesh.cells[c]])
            new_nodes.append(mesh.cell_nodes[c])

    gen = forest.next_generation
    forest.next_generation += 1
    new_mesh = PolyMesh(forest.coords(), new_cells, forest, new_nodes, generation=gen)
    return new_mesh, rejected


# ---------------------------------------------------------------------------
# relations between meshes of one forest
# ---------------------------------------------------------------------------

def _require_related(a: PolyMesh, b: PolyMesh) -> AdaptForest:
    if a.forest is None or a.forest is not b.forest:
        raise UnrelatedMeshes("meshes do not share a forest")
    return a.forest


def overlay_cells(new: PolyMesh, old: PolyMesh) -> list[tuple[PolyMesh, int, int, int]]:
    """Common refinement pieces of two related meshes.

    Each piece is a cell of one mesh contained in a cell of the other;
    returns (geometry_mesh, piece_cell, new_cell, old_cell) tuples covering
    the whole domain exactly once.
    """
    forest = _require_related(new, old)
    new_of_node = {n: c for c, n in enumerate(new.cell_nodes)}
    old_of_node = {n: c for c, n in enumerate(old.cell_nodes)}
    pieces = []
    consumed_old: set[int] = set()
    for c, node in enumerate(new.cell_nodes):
        if node in old_of_node:
            co = old_of_node[node]
            pieces.append((new, c, c, co))
            consumed_old.add(co)
            continue
        cover = forest.covering_cell(node, old_of_node)
        if cover is not None:
            pieces.append((new, c, c, cover))
            consumed_old.add(cover)
    for c, node in enumerate(old.cell_nodes):
        if c in consumed_old:
            continue
        cover = forest.covering_cell(node, new_of_node)
        if cover is None:
            raise UnrelatedMeshes(
                "meshes are not related by nested modification; overlay undefined")
        pieces.append((old, c, cover, c))
    return pieces


def mesh_diff(new: PolyMesh, old: PolyMesh) -> MeshDiff:
    """Cells and edges present in exactly one mesh, with combined sizes.

    hhat tables give, per old-only cell/edge, the pointwise max of the two
    mesh size functions (constant on each diff entity for nested
    modifications).
    """
    forest = _require_related(new, old)
    new_of_node = {n: c for c, n in enumerate(new.cell_nodes)}
    old_node_set = set(old.cell_nodes)
    new_node_set = set(new.cell_nodes)
    cells_only_new = [c for c, n in enumerate(new.cell_nodes) if n not in old_node_set]
    cells_only_old = [c for c, n in enumerate(old.cell_nodes) if n not in new_node_set]
    edges_only_old = [e for e in range(old.n_edges)
                      if old.edge_key(e) not in new._edge_key_index]

    hhat_cells = {}
    new_cells_of_old: dict[int, list[int]] = {}
    for c in cells_only_old:
        cover = forest.covering_cell(old.cell_nodes[c], new_of_node)
        h = float(old.h_cell[c])
        if cover is not None:
            h = max(h, float(new.h_cell[cover]))
            new_cells_of_old.setdefault(c, []).append(cover)
        hhat_cells[c] = h

    hhat_edges = {}
    for e in edges_only_old:
        a, b = old.vertices[old.edge_vertices[e]]
        mid = 0.5 * (a + b)
        h = float(old.h_edge[e])
        # candidate new cells: covers of the incident old cells, else locate
        cands = []
        for side in (old.edge_left[e], old.edge_right[e]):
            if side < 0:
                continue
            cover = forest.covering_cell(old.cell_nodes[int(side)], new_of_node)
            if cover is not None:
                cands.append(cover)
        on_new_skeleton = False
        for cn in cands or range(new.n_cells):
            for ne in new.cell_edges[cn]:
                p, q = new.vertices[new.edge_vertices[ne]]
                if point_on_segment(mid, p, q, 1e-10):
                    on_new_skeleton = True
                    break
            if on_new_skeleton:
                break
        if not on_new_skeleton and cands:
            h = max(h, float(new.h_cell[cands[0]]))
        hhat_edges[e] = h
    return MeshDiff(cells_only_new, cells_only_old, edges_only_old,
                    hhat_cells, hhat_edges)


def finest_common_coarsening(a: PolyMesh, b: PolyMesh) -> PolyMesh:
    """Coarsest-cell partition of which both meshes are refinements.

    Cells are the connected components of the cell-overlap relation between
    the two partitions.  The result carries ``cover_a``/``cover_b``
    attributes listing, per output cell, the covered cell ids of each input.
    """
    forest = _require_related(a, b)

    parent: dict = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        parent[find(x)] = find(y)

    for ca in range(a.n_cells):
        find(("a", ca))
    for cb in range(b.n_cells):
        find(("b", cb))
    try:
        for _, _, c_new, c_old in overlay_cells(a, b):
            union(("a", c_new), ("b", c_old))
    except UnrelatedMeshes:
        _geometric_overlap_union(a, b, union)

    groups: dict = {}
    for ca in range(a.n_cells):
        groups.setdefault(find(("a", ca)), ([], []))[0].append(ca)
    for cb in range(b.n_cells):
        root = find(("b", cb))
        if root not in groups:
            raise InternalError("fcc: cell of b not overlapping any cell of a")
        groups[root][1].append(cb)

    ordered = sorted(groups.values(), key=lambda g: min(g[0]))
    cells, nodes, cover_a, cover_b = [], [], [], []
    for ga, gb in ordered:
        if len(ga) == 1:
            ring = [int(v) for v in a.cells[ga[0]]]
            node_id = a.cell_nodes[ga[0]]
        elif len(gb) == 1:
            ring = [int(v) for v in b.cells[gb[0]]]
            node_id = b.cell_nodes[gb[0]]
        else:
            ring = _trace_boundary(a, ga)
            if ring is None:
                raise InternalError("fcc group does not trace to a simple polygon")
            members = frozenset(a.cell_nodes[c] for c in ga)
            node_id = forest.find_agglomerate(members)
            if node_id is None:
                node_id = forest.new_node(tuple(ring),
                                          merge_children=tuple(sorted(members)))
                for n in members:
                    forest.nodes[n].merge_parents.append(node_id)
                forest.register_agglomerate(members, node_id)
        cells.append(ring)
        nodes.append(node_id)
        cover_a.append(ga)
        cover_b.append(gb)

    gen = forest.next_generation
    forest.next_generation += 1
    fcc = PolyMesh(forest.coords(), cells, forest, nodes, generation=gen)
    fcc.cover_a = cover_a
    fcc.cover_b = cover_b
    return fcc


def _geometric_overlap_union(a: PolyMesh, b: PolyMesh, union) -> None:
    """Shapely fallback joining cells whose regions overlap (non-nested case)."""
    from shapely.geometry import Polygon
    from shapely.strtree import STRtree

    polys_b = [Polygon(b.cell_polygon(c)) for c in range(b.n_cells)]
    tree = STRtree(polys_b)
    for ca in range(a.n_cells):
        pa = Polygon(a.cell_polygon(ca))
        for idx in tree.query(pa):
            cb = int(idx)
            if pa.intersection(polys_b[cb]).area > \
                    1e-12 * max(pa.area, polys_b[cb].area):
                union(("a", ca), ("b", cb))
