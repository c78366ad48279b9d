from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from .config import SolverSettings
from .fe import GAUSS_POINTS, QuadraturePointField, shape_functions, solve_load, strain_at
from .material import MacroLoad, MaterialTable
from .mesh import QuadMesh, build_uniform_mesh, phase_boundary_nodes
from .models import ErrorReport, SolvedRun
from .phase_grid import refine_grid
from .recovery import PHASE_BLIND, RecoveredNodalField

LOGGER = logging.getLogger(__name__)

NEGATIVE_TOLERANCE = 1e-14
_GAUSS_SHAPES = shape_functions(GAUSS_POINTS[:, 0], GAUSS_POINTS[:, 1])
_CHUNK = 65536


class EstimationError(RuntimeError):
    """Raised when error quantities cannot be formed consistently."""


def _phase_blind(recovered: RecoveredNodalField) -> bool:
    return bool(np.any(recovered.phases == PHASE_BLIND))


def _check_sum(squares: np.ndarray, magnitude: np.ndarray, what: str) -> None:
    # Relative to the summed absolute integrand of the same elements.
    negative = squares < -NEGATIVE_TOLERANCE * magnitude
    total = float(np.sum(squares))
    if total < -NEGATIVE_TOLERANCE * float(np.sum(magnitude)) or np.any(negative):
        worst = int(np.argmin(squares))
        raise EstimationError(
            f"Negative {what} integrand sum {total:.3e} "
            f"({int(negative.sum())} elements, worst element {worst}: {squares[worst]:.3e})"
        )


def element_error_squares(
    mesh: QuadMesh,
    field: QuadraturePointField,
    recovered: RecoveredNodalField,
    material: Optional[MaterialTable] = None,
) -> np.ndarray:
    """
    Gauss sum of (sigma* - sigma^h) : (eps* - eps^h) per element.

    Phase-blind recovered values are paired with the strain D^-1 sigma* of the element's own phase.
    """
    nodal_stress, nodal_strain = recovered.element_nodal_values(mesh)
    stress_star = np.einsum("gc,eci->egi", _GAUSS_SHAPES, nodal_stress)
    if _phase_blind(recovered):
        if material is None:
            raise EstimationError(f"{recovered.scheme}: phase-blind recovery needs the material table")
        compliance = np.linalg.inv(material.stiffness_stack(mesh.phases))
        strain_star = np.einsum("eij,egj->egi", compliance, stress_star)
    else:
        strain_star = np.einsum("gc,eci->egi", _GAUSS_SHAPES, nodal_strain)
    products = np.einsum("egi,egi->eg", stress_star - field.stress, strain_star - field.strain)
    scale = field.weights[None, :] * field.det_j
    squares = np.sum(products * scale, axis=1)
    _check_sum(squares, np.sum(np.abs(products) * scale, axis=1) + np.abs(field.element_energy()), recovered.scheme)
    return squares


def interface_elements(mesh: QuadMesh) -> np.ndarray:
    lookup = np.zeros(mesh.n_nodes, dtype=bool)
    lookup[list(phase_boundary_nodes(mesh))] = True
    return lookup[mesh.corners].any(axis=1)


def relative_element_errors(report: ErrorReport, field: QuadraturePointField) -> Tuple[np.ndarray, np.ndarray]:
    """Element error over element energy norm; elements without energy get 0 and a flag."""
    energy = np.sqrt(np.clip(field.element_energy(), 0.0, None))
    floor = 1e-14 * float(energy.max(initial=0.0))
    zero = energy <= floor
    ratios = np.zeros_like(energy)
    np.divide(report.element_errors, energy, out=ratios, where=~zero)
    if np.any(zero & (report.element_errors > 0)):
        LOGGER.warning("%s elements carry error but no strain energy; relative error set to 0", int(np.sum(zero)))
    return ratios, zero


def estimate_error(
    mesh: QuadMesh,
    field: QuadraturePointField,
    recovered: RecoveredNodalField,
    ndof_uniform: Optional[int] = None,
    material: Optional[MaterialTable] = None,
) -> ErrorReport:
    squares = np.maximum(element_error_squares(mesh, field, recovered, material), 0.0)
    total = float(np.sqrt(np.sum(squares)))
    interface = interface_elements(mesh)
    report = ErrorReport(
        scheme=recovered.scheme,
        element_errors=np.sqrt(squares),
        element_energy=np.sqrt(np.clip(field.element_energy(), 0.0, None)),
        total_estimated=total,
        ndof=mesh.ndof,
        ndof_uniform=ndof_uniform or 2 * (mesh.grid.width + 1) ** 2,
        interface_error=float(np.sqrt(np.sum(squares[interface]))),
    )
    ratios, zero = relative_element_errors(report, field)
    report.relative_errors = ratios
    report.zero_energy = zero
    LOGGER.debug("%s estimate: total %.6e, interface %.6e", recovered.scheme, total, report.interface_error)
    return report


def _check_nesting(coarse: SolvedRun, reference: SolvedRun) -> int:
    coarse_grid, fine_grid = coarse.mesh.grid, reference.mesh.grid
    if fine_grid.width % coarse_grid.width or not np.isclose(fine_grid.physical_size, coarse_grid.physical_size):
        raise EstimationError("Reference mesh does not cover the coarse domain with a whole refinement factor")
    if np.any(reference.mesh.sizes != 1):
        raise EstimationError("Reference mesh must be a uniform pixel mesh")
    return fine_grid.width // coarse_grid.width


def true_element_errors(coarse: SolvedRun, reference: SolvedRun) -> np.ndarray:
    """
    Squared energy-norm difference per coarse element, integrated with the Gauss points of the
    reference mesh; coarse strains are evaluated at those points through the pixel nesting.
    """
    factor = _check_nesting(coarse, reference)
    fine, mesh = reference.mesh, coarse.mesh
    owners = mesh.pixel_owner[fine.rows // factor, fine.cols // factor]
    if np.any(owners < 0):
        raise EstimationError("Reference points fall outside the coarse mesh")
    if np.any(mesh.phases[owners] != fine.phases):
        raise EstimationError("Reference and coarse meshes disagree on phases")

    n_points = fine.n_elements * 4
    owner_points = np.repeat(owners, 4)
    points = reference.field.points.reshape(n_points, 2)
    ref_stress = reference.field.stress.reshape(n_points, 3)
    ref_strain = reference.field.strain.reshape(n_points, 3)
    weights = (reference.field.weights[None, :] * reference.field.det_j).reshape(n_points)
    stiffness = coarse.material.stiffness_stack(mesh.phases)

    per_element = np.zeros(mesh.n_elements)
    for start in range(0, n_points, _CHUNK):
        chunk = slice(start, min(start + _CHUNK, n_points))
        elements = owner_points[chunk]
        local = (points[chunk] - mesh.centroids[elements]) / (mesh.side_lengths[elements] / 2.0)[:, None]
        strain = strain_at(mesh, coarse.displacement, elements, local[:, 0], local[:, 1])
        stress = np.einsum("kij,kj->ki", stiffness[elements], strain)
        products = np.einsum("ki,ki->k", ref_stress[chunk] - stress, ref_strain[chunk] - strain)
        per_element += np.bincount(elements, weights=products * weights[chunk], minlength=mesh.n_elements)
    return per_element


def compute_true_error(coarse: SolvedRun, reference: SolvedRun) -> float:
    total = float(np.sum(true_element_errors(coarse, reference)))
    energy = float(np.sum(np.abs(reference.field.element_energy())))
    if total < -NEGATIVE_TOLERANCE * energy:
        raise EstimationError(f"Negative true error square {total:.3e}")
    return float(np.sqrt(max(total, 0.0)))


def effectivity_index(estimated: float, true_error: float) -> float:
    if not true_error > 0:
        raise EstimationError("Effectivity index needs a positive true error")
    return float(estimated) / float(true_error)


def solved_run(mesh: QuadMesh, material: MaterialTable, load: MacroLoad, settings: Optional[SolverSettings] = None) -> SolvedRun:
    displacement, field = solve_load(mesh, material, load, settings)
    return SolvedRun(mesh=mesh, material=material, load=load, displacement=displacement, field=field)


def reference_run(
    coarse_mesh: QuadMesh,
    material: MaterialTable,
    load: MacroLoad,
    refinement: int,
    settings: Optional[SolverSettings] = None,
) -> SolvedRun:
    # Uniform mesh over the r-fold subdivided pixels of the coarse mesh's grid.
    fine_grid = refine_grid(coarse_mesh.grid, refinement)
    fine_mesh = build_uniform_mesh(fine_grid)
    LOGGER.info("Reference solve on %sx%s pixels (ndof=%s)", fine_grid.width, fine_grid.height, fine_mesh.ndof)
    return solved_run(fine_mesh, material, load, settings)

