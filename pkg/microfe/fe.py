from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SolverSettings
from .material import MacroLoad, MaterialTable, stress_tensor
from .mesh import MeshError, QuadElement, QuadMesh

LOGGER = logging.getLogger(__name__)

GAUSS = 1.0 / np.sqrt(3.0)
# Reference corner coordinates (BL, BR, TR, TL) and the 2x2 Gauss points in the same order.
CORNER_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
GAUSS_POINTS = CORNER_XI * GAUSS
GAUSS_WEIGHTS = np.ones(4)


class SolverError(RuntimeError):
    """Raised when the constrained micro problem cannot be solved."""


class CouplingError(ValueError):
    """Raised when a coupling condition cannot be applied to a mesh."""


def shape_functions(xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    xi, eta = np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)
    return 0.25 * (1.0 + xi[..., None] * CORNER_XI[:, 0]) * (1.0 + eta[..., None] * CORNER_XI[:, 1])


def reference_strain_matrix(xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """
    Strain-displacement matrix in reference coordinates, shape ``(..., 3, 8)``.

    For a square of side ``s`` the physical matrix is this one scaled by ``2 / s``.
    """
    xi, eta = np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)
    dxi = 0.25 * CORNER_XI[:, 0] * (1.0 + eta[..., None] * CORNER_XI[:, 1])
    deta = 0.25 * CORNER_XI[:, 1] * (1.0 + xi[..., None] * CORNER_XI[:, 0])
    b = np.zeros(xi.shape + (3, 8))
    b[..., 0, 0::2] = dxi
    b[..., 1, 1::2] = deta
    b[..., 2, 0::2] = deta
    b[..., 2, 1::2] = dxi
    return b


_GAUSS_B = reference_strain_matrix(GAUSS_POINTS[:, 0], GAUSS_POINTS[:, 1])


def _unit_stiffness(d: np.ndarray) -> np.ndarray:
    # Jacobian scaling cancels for squares: det J (s/2)^2 * (2/s)^2 = 1.
    ke = np.einsum("gki,kl,glj->ij", _GAUSS_B, d, _GAUSS_B)
    return 0.5 * (ke + ke.T)


def element_stiffness(element: QuadElement, material: MaterialTable) -> np.ndarray:
    if not element.side_length > 0:
        raise MeshError(f"Element {element.id} has degenerate side length {element.side_length}")
    return _unit_stiffness(material.stiffness(element.phase))


@dataclass
class LinearSystem:
    """Stiffness condensed onto the independent nodes; ``transform`` maps reduced to full nodal dofs."""

    mesh: QuadMesh
    material: MaterialTable
    stiffness: sp.csr_matrix
    transform: sp.csr_matrix
    free_nodes: np.ndarray

    @property
    def ndof(self) -> int:
        return int(self.stiffness.shape[0])

    def reduced_dof(self, node: int, component: int) -> int:
        index = np.searchsorted(self.free_nodes, node)
        if index >= self.free_nodes.size or self.free_nodes[index] != node:
            raise CouplingError(f"Node {node} is hanging and has no independent dofs")
        return int(2 * index + component)


def _element_dofs(mesh: QuadMesh) -> np.ndarray:
    dofs = np.empty((mesh.n_elements, 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.corners
    dofs[:, 1::2] = 2 * mesh.corners + 1
    return dofs


def constraint_transform(mesh: QuadMesh) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Full nodal dofs as linear combinations of the dofs of non-hanging nodes (chains resolved)."""
    free_nodes = np.nonzero(~mesh.hanging_mask)[0]
    node_to_free = np.full(mesh.n_nodes, -1, dtype=np.int64)
    node_to_free[free_nodes] = np.arange(free_nodes.size)
    by_node = {c.hanging: c for c in mesh.constraints}
    resolved: Dict[int, Dict[int, float]] = {}

    def resolve(node: int, trail: Tuple[int, ...] = ()) -> Dict[int, float]:
        if node_to_free[node] >= 0:
            return {int(node_to_free[node]): 1.0}
        if node in resolved:
            return resolved[node]
        if node in trail:
            raise MeshError(f"Cyclic hanging-node constraints through node {node}")
        combined: Dict[int, float] = {}
        constraint = by_node[node]
        for master, weight in zip(constraint.masters, constraint.weights):
            for free, coeff in resolve(master, trail + (node,)).items():
                combined[free] = combined.get(free, 0.0) + weight * coeff
        resolved[node] = combined
        return combined

    rows: List[int] = np.concatenate([2 * free_nodes, 2 * free_nodes + 1]).tolist()
    cols: List[int] = np.concatenate([2 * np.arange(free_nodes.size), 2 * np.arange(free_nodes.size) + 1]).tolist()
    vals: List[float] = [1.0] * len(rows)
    for node in sorted(by_node):
        for free, weight in resolve(node).items():
            for component in (0, 1):
                rows.append(2 * node + component)
                cols.append(2 * free + component)
                vals.append(weight)
    transform = sp.csr_matrix((vals, (rows, cols)), shape=(2 * mesh.n_nodes, 2 * free_nodes.size))
    return transform, free_nodes


def assemble(mesh: QuadMesh, material: MaterialTable) -> LinearSystem:
    material.require(mesh.grid.phases)
    phase_ids = sorted(set(int(p) for p in np.unique(mesh.phases)))
    unit = {phase: _unit_stiffness(material.stiffness(phase)) for phase in phase_ids}
    blocks = np.stack([unit[int(p)] for p in phase_ids])
    lookup = np.searchsorted(np.array(phase_ids), mesh.phases)
    element_matrices = blocks[lookup]

    dofs = _element_dofs(mesh)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    size = 2 * mesh.n_nodes
    full = sp.coo_matrix((element_matrices.ravel(), (rows, cols)), shape=(size, size)).tocsr()

    transform, free_nodes = constraint_transform(mesh)
    reduced = (transform.T @ full @ transform).tocsr()
    reduced = 0.5 * (reduced + reduced.T)
    LOGGER.debug("Assembled %s elements into %s condensed dofs", mesh.n_elements, reduced.shape[0])
    return LinearSystem(mesh=mesh, material=material, stiffness=reduced.tocsr(), transform=transform, free_nodes=free_nodes)


@dataclass
class ConstrainedSystem:
    """
    Coupled problem on the independent unknowns ``v``: reduced dofs are ``elimination @ v + offset``.
    """

    system: LinearSystem
    load: MacroLoad
    matrix: sp.csr_matrix
    rhs: np.ndarray
    elimination: sp.csr_matrix
    offset: np.ndarray
    key: Tuple[int, str] = field(default=(0, ""))

    def expand(self, unknowns: np.ndarray) -> np.ndarray:
        return self.elimination @ unknowns + self.offset


class _AffineRelations:
    # Reduced dof relations u_k = sum(coeff * u_j) + const, resolved to independent dofs.

    def __init__(self, ndof: int) -> None:
        self.ndof = ndof
        self.relations: Dict[int, Tuple[Dict[int, float], float]] = {}

    def fix(self, dof: int, value: float) -> None:
        self.relations[dof] = ({}, float(value))

    def tie(self, dof: int, terms: Dict[int, float], const: float) -> None:
        self.relations[dof] = (terms, float(const))

    def _resolve(self, dof: int, cache: Dict[int, Tuple[Dict[int, float], float]], trail: Tuple[int, ...]):
        if dof not in self.relations:
            return {dof: 1.0}, 0.0
        if dof in cache:
            return cache[dof]
        if dof in trail:
            raise CouplingError(f"Cyclic periodic constraint through dof {dof}")
        terms, const = self.relations[dof]
        combined: Dict[int, float] = {}
        total = const
        for other, coeff in terms.items():
            sub_terms, sub_const = self._resolve(other, cache, trail + (dof,))
            total += coeff * sub_const
            for key, value in sub_terms.items():
                combined[key] = combined.get(key, 0.0) + coeff * value
        cache[dof] = (combined, total)
        return cache[dof]

    def build(self) -> Tuple[sp.csr_matrix, np.ndarray]:
        related = np.zeros(self.ndof, dtype=bool)
        related[list(self.relations)] = True
        independent = np.nonzero(~related)[0]
        column = np.full(self.ndof, -1, dtype=np.int64)
        column[independent] = np.arange(independent.size)
        cache: Dict[int, Tuple[Dict[int, float], float]] = {}
        rows: List[int] = independent.tolist()
        cols: List[int] = list(range(independent.size))
        vals: List[float] = [1.0] * independent.size
        offset = np.zeros(self.ndof)
        for dof in sorted(self.relations):
            terms, const = self._resolve(dof, cache, ())
            offset[dof] = const
            for other, coeff in terms.items():
                if abs(coeff) > 0.0:
                    rows.append(dof)
                    cols.append(int(column[other]))
                    vals.append(coeff)
        elimination = sp.csr_matrix((vals, (rows, cols)), shape=(self.ndof, int(independent.size)))
        return elimination, offset


def _node_terms(system: LinearSystem, node: int, component: int, scale: float = 1.0) -> Dict[int, float]:
    row = system.transform.getrow(2 * node + component)
    return {int(col): scale * float(val) for col, val in zip(row.indices, row.data)}


def _edge_point_terms(
    system: LinearSystem,
    edge_nodes: np.ndarray,
    coords: np.ndarray,
    target: float,
    component: int,
) -> Dict[int, float]:
    # Linear interpolation along a domain edge between the two mesh nodes bracketing ``target``.
    k = int(np.searchsorted(coords, target, side="left"))
    if k < coords.size and abs(coords[k] - target) <= 1e-12 * max(1.0, abs(target)):
        return _node_terms(system, int(edge_nodes[k]), component)
    if k == 0 or k >= coords.size:
        raise CouplingError(f"Point {target} is not bracketed by master edge nodes")
    lo, hi = coords[k - 1], coords[k]
    t = (target - lo) / (hi - lo)
    terms = _node_terms(system, int(edge_nodes[k - 1]), component, 1.0 - t)
    for dof, value in _node_terms(system, int(edge_nodes[k]), component, t).items():
        terms[dof] = terms.get(dof, 0.0) + value
    return terms


def _shared_edge(nodes: np.ndarray, lattice: np.ndarray, partner: np.ndarray, coords: np.ndarray) -> np.ndarray:
    # Nodes of one edge whose lattice index also carries a node on the opposite edge, sorted along the edge.
    shared = nodes[np.isin(lattice[nodes], lattice[partner])]
    return shared[np.argsort(coords[shared])]


def _periodic_relations(system: LinearSystem, load: MacroLoad) -> _AffineRelations:
    """
    Periodic fluctuations: right and top nodes follow the interpolated left and bottom edges plus the
    macro jump. Left and bottom nodes without an opposite partner follow the partnered nodes of their
    own edge, so both edges span the same piecewise linear trace.
    """
    mesh = system.mesh
    n = mesh.grid.width
    if mesh.grid.width != mesh.grid.height:
        raise CouplingError("Periodic coupling requires a square domain")
    size = mesh.grid.physical_size
    eps = np.array([[load.macro_strain[0], load.macro_strain[2] / 2.0], [load.macro_strain[2] / 2.0, load.macro_strain[1]]])
    p, q = mesh.lattice[:, 0], mesh.lattice[:, 1]
    x, y = mesh.positions[:, 0], mesh.positions[:, 1]

    left, right = np.nonzero(q == 0)[0], np.nonzero(q == n)[0]
    bottom, top = np.nonzero(p == n)[0], np.nonzero(p == 0)[0]
    left_shared = _shared_edge(left, p, right, y)
    bottom_shared = _shared_edge(bottom, q, top, x)
    paired_rows = set(p[left_shared].tolist())
    paired_cols = set(q[bottom_shared].tolist())

    relations = _AffineRelations(system.ndof)
    zero = np.zeros(2)
    jump_x = eps @ np.array([size, 0.0])
    jump_y = eps @ np.array([0.0, size])
    for local, node in enumerate(system.free_nodes.tolist()):
        if q[node] == n:
            masters, coords, target, jump = left_shared, y[left_shared], y[node], jump_x
        elif p[node] == 0:
            masters, coords, target, jump = bottom_shared, x[bottom_shared], x[node], jump_y
        elif q[node] == 0 and p[node] not in paired_rows:
            masters, coords, target, jump = left_shared, y[left_shared], y[node], zero
        elif p[node] == n and q[node] not in paired_cols:
            masters, coords, target, jump = bottom_shared, x[bottom_shared], x[node], zero
        else:
            continue
        for component in (0, 1):
            terms = _edge_point_terms(system, masters, coords, target, component)
            relations.tie(2 * local + component, terms, jump[component])

    anchor = int(np.nonzero((p == n) & (q == 0))[0][0])
    relations.fix(system.reduced_dof(anchor, 0), 0.0)
    relations.fix(system.reduced_dof(anchor, 1), 0.0)
    return relations


def _dirichlet_relations(system: LinearSystem, load: MacroLoad) -> _AffineRelations:
    mesh = system.mesh
    relations = _AffineRelations(system.ndof)
    prescribed = load.macro_displacement(mesh.positions)
    for local, node in enumerate(system.free_nodes.tolist()):
        if mesh.domain_boundary_mask[node]:
            relations.fix(2 * local, prescribed[node, 0])
            relations.fix(2 * local + 1, prescribed[node, 1])
    return relations


def _neumann_relations(system: LinearSystem) -> _AffineRelations:
    # Gauge: bottom-left corner fully pinned, top-left corner pinned in x.
    mesh = system.mesh
    n = mesh.grid.width
    p, q = mesh.lattice[:, 0], mesh.lattice[:, 1]
    bottom_left = int(np.nonzero((p == n) & (q == 0))[0][0])
    top_left = int(np.nonzero((p == 0) & (q == 0))[0][0])
    relations = _AffineRelations(system.ndof)
    relations.fix(system.reduced_dof(bottom_left, 0), 0.0)
    relations.fix(system.reduced_dof(bottom_left, 1), 0.0)
    relations.fix(system.reduced_dof(top_left, 0), 0.0)
    return relations


def boundary_tractions(mesh: QuadMesh, macro_stress: np.ndarray) -> np.ndarray:
    """Consistent nodal forces of the uniform traction ``sigma . n`` on the domain boundary (full dofs)."""
    sigma = stress_tensor(macro_stress)
    n = mesh.grid.width
    forces = np.zeros(2 * mesh.n_nodes)
    sides = mesh.side_lengths
    # (local corner pair, outward normal, lattice test on the element)
    edges = (
        ((0, 1), np.array([0.0, -1.0]), mesh.rows + mesh.sizes == n),
        ((1, 2), np.array([1.0, 0.0]), mesh.cols + mesh.sizes == n),
        ((2, 3), np.array([0.0, 1.0]), mesh.rows == 0),
        ((3, 0), np.array([-1.0, 0.0]), mesh.cols == 0),
    )
    for (a, b), normal, on_boundary in edges:
        traction = sigma @ normal
        elements = np.nonzero(on_boundary)[0]
        half = 0.5 * sides[elements]
        for corner in (a, b):
            nodes = mesh.corners[elements, corner]
            np.add.at(forces, 2 * nodes, traction[0] * half)
            np.add.at(forces, 2 * nodes + 1, traction[1] * half)
    return forces


def body_force_vector(mesh: QuadMesh, load: MacroLoad) -> np.ndarray:
    forces = np.zeros(2 * mesh.n_nodes)
    if load.body_force is None:
        return forces
    points = quadrature_points(mesh)
    det_j = (mesh.side_lengths / 2.0) ** 2
    values = np.asarray(load.body_force(points[..., 0], points[..., 1]), dtype=float)
    if values.shape != points.shape:
        raise CouplingError(f"Body force must return shape {points.shape}, got {values.shape}")
    shapes = shape_functions(GAUSS_POINTS[:, 0], GAUSS_POINTS[:, 1])  # (gauss, corner)
    nodal = np.einsum("g,gc,egk,e->eck", GAUSS_WEIGHTS, shapes, values, det_j)
    np.add.at(forces, 2 * mesh.corners, nodal[..., 0])
    np.add.at(forces, 2 * mesh.corners + 1, nodal[..., 1])
    return forces


def apply_coupling(system: LinearSystem, mesh: QuadMesh, load: MacroLoad) -> ConstrainedSystem:
    if system.mesh is not mesh:
        raise CouplingError("Linear system was assembled for a different mesh")
    full_forces = body_force_vector(mesh, load)
    if load.kind == "dirichlet":
        relations = _dirichlet_relations(system, load)
    elif load.kind == "periodic":
        relations = _periodic_relations(system, load)
    else:
        relations = _neumann_relations(system)
        full_forces = full_forces + boundary_tractions(mesh, load.macro_stress)
    elimination, offset = relations.build()
    forces = system.transform.T @ full_forces
    matrix = (elimination.T @ system.stiffness @ elimination).tocsr()
    rhs = elimination.T @ (forces - system.stiffness @ offset)
    LOGGER.debug(
        "%s coupling: %s reduced dofs -> %s unknowns", load.kind, system.ndof, matrix.shape[0]
    )
    return ConstrainedSystem(
        system=system,
        load=load,
        matrix=matrix,
        rhs=np.asarray(rhs).ravel(),
        elimination=elimination,
        offset=offset,
        key=(id(system), load.kind),
    )


@dataclass
class DisplacementField:
    mesh: QuadMesh
    values: np.ndarray
    load: Optional[MacroLoad] = None
    solve_seconds: float = 0.0

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass
class QuadraturePointField:
    """Strain and stress (Voigt, engineering shear) at the 2x2 Gauss points, shape ``(elements, 4, 3)``."""

    mesh: QuadMesh
    strain: np.ndarray
    stress: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    det_j: np.ndarray

    def element_energy(self) -> np.ndarray:
        # Integral of sigma : eps over each element.
        products = np.einsum("egi,egi->eg", self.stress, self.strain)
        return np.einsum("g,eg,eg->e", self.weights, products, self.det_j)

    def strain_energy(self) -> float:
        return 0.5 * float(np.sum(self.element_energy()))

    def volume_average(self) -> Tuple[np.ndarray, np.ndarray]:
        scale = (self.weights[None, :] * self.det_j)[..., None]
        area = float(np.sum(self.weights[None, :] * self.det_j))
        return np.sum(self.stress * scale, axis=(0, 1)) / area, np.sum(self.strain * scale, axis=(0, 1)) / area

    def centroid_strain(self) -> np.ndarray:
        return self.strain.mean(axis=1)


def quadrature_points(mesh: QuadMesh) -> np.ndarray:
    half = (mesh.side_lengths / 2.0)[:, None, None]
    return mesh.centroids[:, None, :] + half * GAUSS_POINTS[None, :, :]


def element_displacements(displacement: DisplacementField) -> np.ndarray:
    return displacement.values[displacement.mesh.corners].reshape(displacement.mesh.n_elements, 8)


def strain_at(mesh: QuadMesh, displacement: DisplacementField, elements: np.ndarray, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Strain of ``elements[k]`` at local coordinates ``(xi[k], eta[k])``."""
    b = reference_strain_matrix(xi, eta)
    u = element_displacements(displacement)[elements]
    scale = 2.0 / mesh.side_lengths[elements]
    return np.einsum("kij,kj->ki", b, u) * scale[:, None]


def stresses_at_quadrature(displacement: DisplacementField, material: MaterialTable) -> QuadraturePointField:
    mesh = displacement.mesh
    u = element_displacements(displacement)
    strain = np.einsum("gij,ej->egi", _GAUSS_B, u) * (2.0 / mesh.side_lengths)[:, None, None]
    d = material.stiffness_stack(mesh.phases)
    stress = np.einsum("eij,egj->egi", d, strain)
    det_j = np.repeat(((mesh.side_lengths / 2.0) ** 2)[:, None], 4, axis=1)
    return QuadraturePointField(
        mesh=mesh,
        strain=strain,
        stress=stress,
        points=quadrature_points(mesh),
        weights=GAUSS_WEIGHTS.copy(),
        det_j=det_j,
    )


class Solver:
    """Direct sparse factorization for moderate sizes, Jacobi-preconditioned CG above ``direct_limit``."""

    def __init__(self, settings: Optional[SolverSettings] = None, logger: Optional[logging.Logger] = None) -> None:
        self.settings = settings or SolverSettings()
        self.logger = logger or LOGGER

    def _factorize(self, matrix: sp.csr_matrix):
        if matrix.shape[0] <= self.settings.direct_limit:
            try:
                return spla.factorized(matrix.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"Sparse factorization failed: {exc}") from exc

        diagonal = matrix.diagonal()
        if np.any(diagonal <= 0):
            raise SolverError("Non-positive diagonal entry; system is not positive definite")
        preconditioner = spla.LinearOperator(matrix.shape, matvec=lambda x: x / diagonal)

        def iterate(rhs: np.ndarray) -> np.ndarray:
            solution, info = spla.cg(
                matrix, rhs, rtol=self.settings.rtol, maxiter=self.settings.max_iterations, M=preconditioner
            )
            if info != 0:
                raise SolverError(f"Conjugate gradient did not converge (info={info})")
            return solution

        return iterate

    def _check(self, matrix: sp.csr_matrix, rhs: np.ndarray, solution: np.ndarray) -> None:
        if not np.all(np.isfinite(solution)):
            raise SolverError("Solution contains non-finite values; the system is singular")
        scale = float(np.linalg.norm(rhs))
        if scale == 0.0:
            return
        residual = float(np.linalg.norm(matrix @ solution - rhs)) / scale
        self.logger.debug("Relative residual %.3e", residual)
        if residual > self.settings.residual_tolerance:
            raise SolverError(f"Relative residual {residual:.3e} exceeds {self.settings.residual_tolerance:.1e}")

    def solve(self, constrained: ConstrainedSystem) -> DisplacementField:
        return self.solve_cases([constrained])[0]

    def solve_cases(self, cases: Sequence[ConstrainedSystem]) -> List[DisplacementField]:
        # Load cases sharing a coupling share their matrix; factorize once per distinct matrix.
        solvers: Dict[Tuple[int, str], object] = {}
        fields: List[DisplacementField] = []
        for case in cases:
            started = time.perf_counter()
            if case.matrix.shape[0] == 0:
                unknowns = np.zeros(0)
            else:
                solve = solvers.get(case.key)
                if solve is None:
                    solve = self._factorize(case.matrix)
                    solvers[case.key] = solve
                unknowns = np.asarray(solve(case.rhs)) if np.any(case.rhs) else np.zeros(case.matrix.shape[0])  # type: ignore[operator]
                self._check(case.matrix, case.rhs, unknowns)
            reduced = case.expand(unknowns)
            values = (case.system.transform @ reduced).reshape(-1, 2)
            elapsed = time.perf_counter() - started
            self.logger.debug("Solved %s case with %s unknowns in %.3fs", case.load.kind, case.matrix.shape[0], elapsed)
            fields.append(DisplacementField(mesh=case.system.mesh, values=values, load=case.load, solve_seconds=elapsed))
        return fields


def solve(constrained: ConstrainedSystem, settings: Optional[SolverSettings] = None) -> DisplacementField:
    return Solver(settings).solve(constrained)


def solve_load(mesh: QuadMesh, material: MaterialTable, load: MacroLoad, settings: Optional[SolverSettings] = None) -> Tuple[DisplacementField, QuadraturePointField]:
    # assemble -> couple -> solve -> Gauss-point fields in one call.
    system = assemble(mesh, material)
    displacement = solve(apply_coupling(system, mesh, load), settings)
    return displacement, stresses_at_quadrature(displacement, material)
