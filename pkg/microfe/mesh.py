from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .phase_grid import PhaseGrid

LOGGER = logging.getLogger(__name__)

ALGORITHMS = ("basic", "hard", "soft")
MESH_SCHEMA = "microfe.quadmesh/1"

# Leaf key: (first raster line, first column, side in pixels).
Leaf = Tuple[int, int, int]


class MeshError(ValueError):
    """Raised for inconsistent quadtree meshes or unknown coarsening options."""


@dataclass(frozen=True)
class MeshNode:
    id: int
    position: Tuple[float, float]
    kind: str = "free"
    masters: Optional[Tuple[int, int]] = None


@dataclass(frozen=True)
class QuadElement:
    id: int
    corner_nodes: Tuple[int, int, int, int]
    level: int
    side_length: float
    phase: int
    origin_pixels: Leaf


@dataclass(frozen=True)
class Constraint:
    """Hanging node tied to the end nodes of the coarse edge it lies on."""

    hanging: int
    masters: Tuple[int, int]
    weights: Tuple[float, float] = (0.5, 0.5)


@dataclass(eq=False)
class QuadMesh:
    """
    Quadtree mesh over a PhaseGrid.

    Topology lives on the integer node lattice: lattice point ``(p, q)`` sits on raster line
    boundary ``p`` (0 = top of the raster) and column boundary ``q``. Physical coordinates follow
    ``x = q * h`` and ``y = (n - p) * h`` so that corners listed bottom-left, bottom-right,
    top-right, top-left run counterclockwise.
    """

    grid: PhaseGrid
    rows: np.ndarray
    cols: np.ndarray
    sizes: np.ndarray
    phases: np.ndarray
    corners: np.ndarray
    lattice: np.ndarray
    constraints: List[Constraint] = field(default_factory=list)
    hosts: Dict[int, int] = field(default_factory=dict)

    @property
    def n_elements(self) -> int:
        return int(self.rows.size)

    @property
    def n_nodes(self) -> int:
        return int(self.lattice.shape[0])

    @cached_property
    def levels(self) -> np.ndarray:
        return np.log2(self.sizes).round().astype(np.int64)

    @cached_property
    def side_lengths(self) -> np.ndarray:
        return self.sizes * self.grid.pixel_size

    @cached_property
    def positions(self) -> np.ndarray:
        h = self.grid.pixel_size
        n = self.grid.height
        return np.column_stack([self.lattice[:, 1] * h, (n - self.lattice[:, 0]) * h]).astype(float)

    @cached_property
    def centroids(self) -> np.ndarray:
        h = self.grid.pixel_size
        n = self.grid.height
        half = self.sizes / 2.0
        return np.column_stack([(self.cols + half) * h, (n - self.rows - half) * h])

    @cached_property
    def hanging_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for constraint in self.constraints:
            mask[constraint.hanging] = True
        return mask

    @property
    def n_hanging(self) -> int:
        return len(self.constraints)

    @property
    def ndof(self) -> int:
        return 2 * (self.n_nodes - self.n_hanging)

    @cached_property
    def domain_boundary_mask(self) -> np.ndarray:
        n = self.grid.height
        p, q = self.lattice[:, 0], self.lattice[:, 1]
        return (p == 0) | (p == n) | (q == 0) | (q == n)

    @cached_property
    def hanging_on_element(self) -> Dict[int, List[int]]:
        members: Dict[int, List[int]] = {}
        for node, element in self.hosts.items():
            members.setdefault(element, []).append(node)
        return members

    @cached_property
    def node_elements(self) -> List[List[int]]:
        # Elements whose closed boundary contains the node: corners plus the coarse host of a hanging node.
        incident: List[List[int]] = [[] for _ in range(self.n_nodes)]
        for element, corner_ids in enumerate(self.corners.tolist()):
            for node in corner_ids:
                incident[node].append(element)
        for node, element in sorted(self.hosts.items()):
            incident[node].append(element)
        return incident

    @cached_property
    def pixel_owner(self) -> np.ndarray:
        owner = np.full((self.grid.height, self.grid.width), -1, dtype=np.int64)
        if np.all(self.sizes == 1):
            owner[self.rows, self.cols] = np.arange(self.n_elements)
            return owner
        for element, (r, c, s) in enumerate(zip(self.rows.tolist(), self.cols.tolist(), self.sizes.tolist())):
            owner[r : r + s, c : c + s] = element
        return owner

    @cached_property
    def element_neighbors(self) -> List[List[int]]:
        # Elements sharing at least one node (corner or hanging node on an edge).
        node_elements = self.node_elements
        neighbors: List[List[int]] = []
        for element in range(self.n_elements):
            nodes = list(self.corners[element]) + self.hanging_on_element.get(element, [])
            found: Set[int] = set()
            for node in nodes:
                found.update(node_elements[node])
            found.discard(element)
            neighbors.append(sorted(found))
        return neighbors

    def constraint_nodes(self) -> Set[int]:
        involved: Set[int] = set()
        for constraint in self.constraints:
            involved.add(constraint.hanging)
            involved.update(constraint.masters)
        return involved

    def leaves(self) -> List[Leaf]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.sizes.tolist()))

    def level_counts(self) -> Dict[int, int]:
        levels, counts = np.unique(self.levels, return_counts=True)
        return {int(level): int(count) for level, count in zip(levels, counts)}

    @property
    def nodes(self) -> List[MeshNode]:
        masters = {c.hanging: c.masters for c in self.constraints}
        return [
            MeshNode(
                id=node,
                position=(float(x), float(y)),
                kind="hanging" if node in masters else "free",
                masters=masters.get(node),
            )
            for node, (x, y) in enumerate(self.positions.tolist())
        ]

    @property
    def elements(self) -> List[QuadElement]:
        h = self.grid.pixel_size
        return [
            QuadElement(
                id=element,
                corner_nodes=tuple(int(n) for n in self.corners[element]),  # type: ignore[arg-type]
                level=int(self.levels[element]),
                side_length=float(self.sizes[element] * h),
                phase=int(self.phases[element]),
                origin_pixels=(int(self.rows[element]), int(self.cols[element]), int(self.sizes[element])),
            )
            for element in range(self.n_elements)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": MESH_SCHEMA,
            "grid_size": self.grid.width,
            "physical_size": self.grid.physical_size,
            "ndof": self.ndof,
            "nodes": [
                {
                    "id": node.id,
                    "x": node.position[0],
                    "y": node.position[1],
                    "kind": node.kind,
                    "masters": list(node.masters) if node.masters else None,
                }
                for node in self.nodes
            ],
            "elements": [
                {
                    "id": element.id,
                    "corners": list(element.corner_nodes),
                    "level": element.level,
                    "phase": element.phase,
                    "origin": list(element.origin_pixels),
                }
                for element in self.elements
            ],
        }


def mesh_from_dict(data: Dict[str, Any], grid: PhaseGrid) -> QuadMesh:
    if data.get("schema") != MESH_SCHEMA:
        raise MeshError(f"Unsupported mesh schema: {data.get('schema')!r}")
    if int(data.get("grid_size", -1)) != grid.width:
        raise MeshError("Mesh was built for a different raster size")
    leaves = [tuple(int(v) for v in element["origin"]) for element in data.get("elements", [])]
    return _assemble_mesh(grid, leaves)  # type: ignore[arg-type]


def _assemble_mesh(grid: PhaseGrid, leaves: Sequence[Leaf]) -> QuadMesh:
    """Number nodes and elements of a leaf set and derive the hanging-node constraints."""
    if not leaves:
        raise MeshError("A mesh needs at least one element")
    leaf_array = np.array(sorted(leaves), dtype=np.int64)
    rows, cols, sizes = leaf_array[:, 0], leaf_array[:, 1], leaf_array[:, 2]
    stride = grid.width + 1

    corner_p = np.stack([rows + sizes, rows + sizes, rows, rows], axis=1)
    corner_q = np.stack([cols, cols + sizes, cols + sizes, cols], axis=1)
    keys = corner_p * stride + corner_q
    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
    corners = inverse.reshape(-1, 4)
    lattice = np.column_stack([unique_keys // stride, unique_keys % stride])

    phases = grid.labels[rows, cols].astype(np.int64)

    constraints: List[Constraint] = []
    hosts: Dict[int, int] = {}
    coarse = np.nonzero(sizes > 1)[0]
    if coarse.size:
        key_to_node = {int(k): i for i, k in enumerate(unique_keys.tolist())}
        for element in coarse.tolist():
            r, c, s = int(rows[element]), int(cols[element]), int(sizes[element])
            bl, br, tr, tl = (int(n) for n in corners[element])
            # Each edge walked from its first to its second end node.
            edges = (
                (bl, br, lambda t: (r + s, c + t)),
                (br, tr, lambda t: (r + s - t, c + s)),
                (tl, tr, lambda t: (r, c + t)),
                (bl, tl, lambda t: (r + s - t, c)),
            )
            for start, end, point in edges:
                for t in range(1, s):
                    p, q = point(t)
                    node = key_to_node.get(p * stride + q)
                    if node is None:
                        continue
                    if node in hosts:
                        raise MeshError(f"Node {node} lies inside the edges of two elements")
                    hosts[node] = element
                    constraints.append(Constraint(hanging=node, masters=(start, end), weights=(1.0 - t / s, t / s)))
    constraints.sort(key=lambda item: item.hanging)

    mesh = QuadMesh(
        grid=grid,
        rows=rows,
        cols=cols,
        sizes=sizes,
        phases=phases,
        corners=corners,
        lattice=lattice,
        constraints=constraints,
        hosts=hosts,
    )
    covered = int(np.sum(sizes * sizes))
    if covered != grid.width * grid.height:
        raise MeshError(f"Leaves cover {covered} pixels, raster has {grid.width * grid.height}")
    return mesh


def build_uniform_mesh(grid: PhaseGrid) -> QuadMesh:
    rows, cols = np.indices((grid.height, grid.width))
    leaves = list(zip(rows.ravel().tolist(), cols.ravel().tolist(), [1] * grid.labels.size))
    mesh = _assemble_mesh(grid, leaves)
    LOGGER.debug("Uniform mesh: %s elements, %s nodes, ndof=%s", mesh.n_elements, mesh.n_nodes, mesh.ndof)
    return mesh


def phase_boundary_nodes(mesh: QuadMesh) -> Set[int]:
    # A node is on a phase boundary when its incident elements carry at least two phases.
    low = np.full(mesh.n_nodes, np.iinfo(np.int64).max, dtype=np.int64)
    high = np.full(mesh.n_nodes, -1, dtype=np.int64)
    element_phase = np.repeat(mesh.phases, 4)
    np.minimum.at(low, mesh.corners.ravel(), element_phase)
    np.maximum.at(high, mesh.corners.ravel(), element_phase)
    for node, element in mesh.hosts.items():
        low[node] = min(low[node], mesh.phases[element])
        high[node] = max(high[node], mesh.phases[element])
    return set(np.nonzero(low != high)[0].tolist())


def _elements_touching(mesh: QuadMesh, nodes: Iterable[int]) -> np.ndarray:
    lookup = np.zeros(mesh.n_nodes, dtype=bool)
    lookup[list(nodes)] = True
    return lookup[mesh.corners].any(axis=1)


def _marks_from_mask(excluded: np.ndarray) -> FrozenSet[int]:
    return frozenset(np.nonzero(~excluded)[0].tolist())


def mark_basic(mesh: QuadMesh, boundary_nodes: Iterable[int]) -> FrozenSet[int]:
    return _marks_from_mask(_elements_touching(mesh, boundary_nodes))


def mark_hard(mesh: QuadMesh) -> FrozenSet[int]:
    # Phase-boundary nodes and every node taking part in a constraint block coarsening.
    excluded = phase_boundary_nodes(mesh) | mesh.constraint_nodes()
    return _marks_from_mask(_elements_touching(mesh, excluded))


def mark_soft(mesh: QuadMesh) -> FrozenSet[int]:
    """
    Like ``mark_hard`` with a one-element buffer: an element stays unmarked when any of its nodes
    belongs to an element that touches the phase boundary or owns a constrained node.
    """
    boundary_elements = _elements_touching(mesh, phase_boundary_nodes(mesh))
    constraint_elements = _elements_touching(mesh, mesh.constraint_nodes())
    buffer_nodes = np.unique(mesh.corners[boundary_elements | constraint_elements])
    return _marks_from_mask(_elements_touching(mesh, buffer_nodes.tolist()))


def mark(mesh: QuadMesh, algorithm: str) -> FrozenSet[int]:
    if algorithm == "hard":
        return mark_hard(mesh)
    if algorithm == "soft":
        return mark_soft(mesh)
    if algorithm == "basic":
        return mark_basic(mesh, phase_boundary_nodes(mesh))
    raise MeshError(f"Unknown coarsening algorithm: {algorithm} (expected one of {', '.join(ALGORITHMS)})")


def mergeable_blocks(mesh: QuadMesh, marks: Iterable[int]) -> List[Tuple[Leaf, Tuple[int, int, int, int]]]:
    """Aligned 2x2 sibling blocks whose four elements are marked, equally sized and of one phase."""
    marked = set(marks)
    index = {leaf: element for element, leaf in enumerate(mesh.leaves())}
    blocks: List[Tuple[Leaf, Tuple[int, int, int, int]]] = []
    for element, (r, c, s) in enumerate(mesh.leaves()):
        if r % (2 * s) or c % (2 * s):
            continue
        siblings = (
            index.get((r, c, s)),
            index.get((r, c + s, s)),
            index.get((r + s, c, s)),
            index.get((r + s, c + s, s)),
        )
        if any(sibling is None or sibling not in marked for sibling in siblings):
            continue
        if len({int(mesh.phases[sibling]) for sibling in siblings}) != 1:  # type: ignore[index]
            continue
        blocks.append(((r, c, 2 * s), siblings))  # type: ignore[arg-type]
    return blocks


def coarsen(mesh: QuadMesh, marks: Iterable[int]) -> QuadMesh:
    marks = set(marks)
    unknown = [m for m in marks if not 0 <= m < mesh.n_elements]
    if unknown:
        raise MeshError(f"Marks reference unknown elements: {sorted(unknown)[:5]}")
    blocks = mergeable_blocks(mesh, marks)
    if not blocks:
        LOGGER.debug("No aligned block qualifies for merging; mesh unchanged")
        return mesh
    merged = {child for _, children in blocks for child in children}
    leaves = [leaf for element, leaf in enumerate(mesh.leaves()) if element not in merged]
    leaves.extend(parent for parent, _ in blocks)
    coarse = _assemble_mesh(mesh.grid, leaves)
    LOGGER.debug(
        "Merged %s blocks: %s -> %s elements, %s hanging nodes, ndof %s -> %s",
        len(blocks),
        mesh.n_elements,
        coarse.n_elements,
        coarse.n_hanging,
        mesh.ndof,
        coarse.ndof,
    )
    return coarse


def coarsen_pipeline(grid: PhaseGrid, algorithm: str = "soft", steps: int = 3) -> List[QuadMesh]:
    if steps < 0:
        raise MeshError(f"steps must be non-negative, got {steps}")
    if algorithm not in ALGORITHMS:
        raise MeshError(f"Unknown coarsening algorithm: {algorithm}")
    meshes = [build_uniform_mesh(grid)]
    for step in range(1, steps + 1):
        current = meshes[-1]
        marks = mark(current, algorithm)
        if not marks:
            LOGGER.warning("Step %s: no element marked for coarsening", step)
        coarse = coarsen(current, marks)
        LOGGER.info(
            "Coarsening step %s (%s): %s elements, ndof %s, factor %.4f",
            step,
            algorithm,
            coarse.n_elements,
            coarse.ndof,
            coarse.ndof / meshes[0].ndof,
        )
        meshes.append(coarse)
    return meshes


def max_hanging_per_edge(mesh: QuadMesh) -> int:
    counts: Dict[Tuple[int, int], int] = {}
    for constraint in mesh.constraints:
        counts[constraint.masters] = counts.get(constraint.masters, 0) + 1
    return max(counts.values(), default=0)
