from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fe import GAUSS_POINTS, QuadraturePointField, shape_functions
from .mesh import QuadMesh

LOGGER = logging.getLogger(__name__)

SCHEMES = ("standard_spr", "modified_spr", "averaging")
FULL_BASIS: Tuple[str, ...] = ("1", "x", "y", "xy")
# Tried in order when a patch cannot support the full bilinear basis.
REDUCED_BASES: Tuple[Tuple[str, ...], ...] = (
    ("1", "x", "y", "xy"),
    ("1", "x", "y"),
    ("1", "x"),
    ("1", "y"),
    ("1",),
)
SINGULAR_RATIO = 1e-10
PHASE_BLIND = -1


class SingularPatchError(RuntimeError):
    """Raised when a patch cannot determine the requested polynomial terms."""


def _monomials(local: np.ndarray, terms: Sequence[str]) -> np.ndarray:
    x, y = local[:, 0], local[:, 1]
    columns = {"1": np.ones_like(x), "x": x, "y": y, "xy": x * y}
    try:
        return np.column_stack([columns[term] for term in terms])
    except KeyError as exc:
        raise SingularPatchError(f"Unknown patch term: {exc.args[0]}") from exc


@dataclass(frozen=True)
class PatchBasis:
    """Least-squares polynomial over a patch; coordinates are shifted to ``center`` and divided by ``scale``."""

    terms: Tuple[str, ...]
    coefficients: np.ndarray
    center: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        local = (points - np.asarray(self.center)) / self.scale
        return _monomials(local, self.terms) @ self.coefficients


def fit_patch(
    positions: np.ndarray,
    values: np.ndarray,
    terms: Sequence[str] = FULL_BASIS,
    center: Optional[Sequence[float]] = None,
    scale: Optional[float] = None,
) -> PatchBasis:
    """
    Solve the normal equations ``A a = b`` of the patch least-squares problem for each column of
    ``values``. Raises SingularPatchError for too few samples or a (numerically) singular ``A``.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    terms = tuple(terms)
    if positions.shape[0] < len(terms):
        raise SingularPatchError(f"{positions.shape[0]} samples cannot determine {len(terms)} terms")
    origin = np.asarray(center, dtype=float) if center is not None else positions.mean(axis=0)
    if scale is None:
        spread = float(np.max(np.abs(positions - origin))) if positions.size else 0.0
        scale = spread if spread > 0 else 1.0

    p = _monomials((positions - origin) / scale, terms)
    a = p.T @ p
    singular_values = np.linalg.svd(a, compute_uv=False)
    if singular_values[-1] < SINGULAR_RATIO * singular_values[0]:
        raise SingularPatchError(f"Patch matrix is singular for terms {list(terms)}")
    coefficients = np.linalg.solve(a, p.T @ values)
    return PatchBasis(terms=terms, coefficients=coefficients, center=(float(origin[0]), float(origin[1])), scale=float(scale))


def fit_reduced(positions: np.ndarray, values: np.ndarray, center: Sequence[float], scale: float) -> PatchBasis:
    # Full basis first, then drop xy, then one linear term, then the constant fit.
    for terms in REDUCED_BASES:
        if len(positions) < len(terms):
            continue
        try:
            return fit_patch(positions, values, terms, center=center, scale=scale)
        except SingularPatchError:
            continue
    raise SingularPatchError("Patch has no samples")


@dataclass(frozen=True)
class CenterSamples:
    positions: np.ndarray
    stress: np.ndarray
    strain: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.hstack([self.stress, self.strain])


def superconvergent_samples(field: QuadraturePointField) -> CenterSamples:
    # The bilinear fit through the 2x2 Gauss values takes the mean of the four at the centroid.
    return CenterSamples(
        positions=field.mesh.centroids.copy(),
        stress=field.stress.mean(axis=1),
        strain=field.strain.mean(axis=1),
    )


@dataclass
class RecoveredNodalField:
    """
    Recovered nodal stress and strain keyed by (node, phase). Phase-blind values use phase -1;
    phase-aware schemes store one row per distinct incident phase.
    """

    scheme: str
    node_ids: np.ndarray
    phases: np.ndarray
    stress: np.ndarray
    strain: np.ndarray

    def __post_init__(self) -> None:
        self._index: Dict[Tuple[int, int], int] = {
            (int(n), int(p)): row for row, (n, p) in enumerate(zip(self.node_ids, self.phases))
        }

    def values_at(self, node: int, phase: int = PHASE_BLIND) -> Tuple[np.ndarray, np.ndarray]:
        row = self._row(node, phase)
        return self.stress[row], self.strain[row]

    def _row(self, node: int, phase: int) -> int:
        row = self._index.get((int(node), int(phase)))
        if row is None:
            row = self._index.get((int(node), PHASE_BLIND))
        if row is None:
            raise KeyError(f"No recovered value for node {node} (phase {phase})")
        return row

    def count_at(self, node: int) -> int:
        return int(np.sum(self.node_ids == node))

    def element_nodal_values(self, mesh: QuadMesh) -> Tuple[np.ndarray, np.ndarray]:
        """Corner values per element, each read with the element's own phase: two ``(elements, 4, 3)`` arrays."""
        rows = np.empty(mesh.corners.shape, dtype=np.int64)
        for element in range(mesh.n_elements):
            phase = int(mesh.phases[element])
            for corner, node in enumerate(mesh.corners[element]):
                rows[element, corner] = self._row(int(node), phase)
        return self.stress[rows], self.strain[rows]


def _expand_patch(
    mesh: QuadMesh,
    positions: np.ndarray,
    start: Sequence[int],
    phase: Optional[int],
    center: np.ndarray,
    scale: float,
) -> List[int]:
    # Breadth-first growth over element adjacency until the full basis is determined.
    patch = sorted(set(start))
    members = set(patch)
    neighbors = mesh.element_neighbors
    while True:
        if len(patch) >= len(FULL_BASIS):
            try:
                fit_patch(positions[patch], np.zeros(len(patch)), FULL_BASIS, center=center, scale=scale)
                return patch
            except SingularPatchError:
                pass
        frontier = {
            other
            for element in patch
            for other in neighbors[element]
            if other not in members and (phase is None or int(mesh.phases[other]) == phase)
        }
        if not frontier:
            return patch
        members.update(frontier)
        patch.extend(sorted(frontier))


def _spr(mesh: QuadMesh, field: QuadraturePointField, phase_aware: bool) -> RecoveredNodalField:
    samples = superconvergent_samples(field)
    values = samples.values
    node_positions = mesh.positions
    sides = mesh.side_lengths
    node_ids: List[int] = []
    phases: List[int] = []
    recovered: List[np.ndarray] = []
    reduced = 0

    for node, incident in enumerate(mesh.node_elements):
        groups: Dict[int, List[int]] = {}
        for element in incident:
            key = int(mesh.phases[element]) if phase_aware else PHASE_BLIND
            groups.setdefault(key, []).append(element)
        center = node_positions[node]
        for phase, elements in sorted(groups.items()):
            scale = float(np.max(sides[elements]))
            if mesh.hanging_mask[node]:
                patch = sorted(elements)
            else:
                patch = _expand_patch(mesh, samples.positions, elements, phase if phase_aware else None, center, scale)
            basis = fit_reduced(samples.positions[patch], values[patch], center=center, scale=scale)
            if len(basis.terms) < len(FULL_BASIS):
                reduced += 1
            node_ids.append(node)
            phases.append(phase)
            recovered.append(basis.evaluate(center)[0])

    scheme = "modified_spr" if phase_aware else "standard_spr"
    LOGGER.debug("%s: %s nodal values, %s with reduced basis", scheme, len(node_ids), reduced)
    stacked = np.array(recovered).reshape(-1, 6)
    return RecoveredNodalField(
        scheme=scheme,
        node_ids=np.array(node_ids, dtype=np.int64),
        phases=np.array(phases, dtype=np.int64),
        stress=stacked[:, :3],
        strain=stacked[:, 3:],
    )


def spr_standard(mesh: QuadMesh, field: QuadraturePointField) -> RecoveredNodalField:
    return _spr(mesh, field, phase_aware=False)


def spr_modified(mesh: QuadMesh, field: QuadraturePointField) -> RecoveredNodalField:
    return _spr(mesh, field, phase_aware=True)


_EXTRAPOLATION = np.linalg.inv(shape_functions(GAUSS_POINTS[:, 0], GAUSS_POINTS[:, 1]))


def element_corner_values(field: QuadraturePointField) -> Tuple[np.ndarray, np.ndarray]:
    # Invert N(x_qp): corner values whose bilinear interpolant passes through the Gauss values.
    stress = np.einsum("cg,egi->eci", _EXTRAPOLATION, field.stress)
    strain = np.einsum("cg,egi->eci", _EXTRAPOLATION, field.strain)
    return stress, strain


def _local_coordinates(mesh: QuadMesh, element: int, point: np.ndarray) -> np.ndarray:
    return (point - mesh.centroids[element]) / (mesh.side_lengths[element] / 2.0)


def averaging_recovery(mesh: QuadMesh, field: QuadraturePointField) -> RecoveredNodalField:
    corner_stress, corner_strain = element_corner_values(field)
    values = np.concatenate([corner_stress, corner_strain], axis=2)

    node_keys = mesh.corners.ravel()
    phase_keys = np.repeat(mesh.phases, 4)
    contributions = values.reshape(-1, 6)

    # A coarse host contributes its edge interpolant at each hanging node it carries.
    extra_nodes: List[int] = []
    extra_phases: List[int] = []
    extra_values: List[np.ndarray] = []
    for node, element in sorted(mesh.hosts.items()):
        local = _local_coordinates(mesh, element, mesh.positions[node])
        weights = shape_functions(local[0], local[1])
        extra_nodes.append(node)
        extra_phases.append(int(mesh.phases[element]))
        extra_values.append(weights @ values[element])
    if extra_nodes:
        node_keys = np.concatenate([node_keys, extra_nodes])
        phase_keys = np.concatenate([phase_keys, extra_phases])
        contributions = np.vstack([contributions, np.array(extra_values)])

    pairs = np.column_stack([node_keys, phase_keys])
    unique_pairs, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    sums = np.zeros((unique_pairs.shape[0], 6))
    np.add.at(sums, inverse, contributions)
    counts = np.bincount(inverse, minlength=unique_pairs.shape[0])
    means = sums / counts[:, None]
    LOGGER.debug("averaging: %s nodal values over %s nodes", unique_pairs.shape[0], mesh.n_nodes)
    return RecoveredNodalField(
        scheme="averaging",
        node_ids=unique_pairs[:, 0].astype(np.int64),
        phases=unique_pairs[:, 1].astype(np.int64),
        stress=means[:, :3],
        strain=means[:, 3:],
    )


RECOVERY = {
    "standard_spr": spr_standard,
    "modified_spr": spr_modified,
    "averaging": averaging_recovery,
}


def recover(mesh: QuadMesh, field: QuadraturePointField, scheme: str) -> RecoveredNodalField:
    try:
        method = RECOVERY[scheme]
    except KeyError as exc:
        raise ValueError(f"Unknown recovery scheme: {scheme} (expected one of {', '.join(SCHEMES)})") from exc
    return method(mesh, field)
