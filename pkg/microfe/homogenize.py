from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import SolverSettings
from .fe import Solver, apply_coupling, assemble, stresses_at_quadrature
from .material import MacroLoad, MaterialTable
from .mesh import QuadMesh
from .phase_grid import PhaseGrid

LOGGER = logging.getLogger(__name__)

COEFFICIENTS = ("A11", "A12", "A13", "A22", "A23", "A33")
_COEFFICIENT_INDEX = {"A11": (0, 0), "A12": (0, 1), "A13": (0, 2), "A22": (1, 1), "A23": (1, 2), "A33": (2, 2)}
VOIGT_NOTE = "Voigt order (xx, yy, xy) with engineering shear strain gamma_xy"
NEGLIGIBLE = 1e-10
ASYMMETRY_LIMIT = 1e-8


class HomogenizationError(RuntimeError):
    """Raised when an effective tensor is not symmetric positive definite."""


@dataclass(frozen=True)
class ElasticityTensor2D:
    matrix: np.ndarray
    coupling: str
    step: Optional[int] = None
    asymmetry: float = 0.0

    def coefficient(self, name: str) -> float:
        i, j = _COEFFICIENT_INDEX[name]
        return float(self.matrix[i, j])

    def as_dict(self) -> Dict[str, object]:
        return {
            "coupling": self.coupling,
            "step": self.step,
            "convention": VOIGT_NOTE,
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "asymmetry": float(self.asymmetry),
        }


def _unit_cases(kind: str) -> List[MacroLoad]:
    units = np.eye(3)
    if kind == "neumann":
        return [MacroLoad(kind, macro_stress=units[k]) for k in range(3)]
    return [MacroLoad(kind, macro_strain=units[k]) for k in range(3)]


def homogenized_tensor(
    mesh: QuadMesh,
    material: MaterialTable,
    coupling: str,
    settings: Optional[SolverSettings] = None,
    step: Optional[int] = None,
    solver: Optional[Solver] = None,
) -> ElasticityTensor2D:
    """
    Effective plane-strain stiffness from three unit load cases. Strain-driven couplings give the
    averaged stresses as columns; the stress-driven coupling gives the compliance, which is inverted.
    """
    solver = solver or Solver(settings)
    system = assemble(mesh, material)
    cases = _unit_cases(coupling)
    kind = cases[0].kind
    constrained = [apply_coupling(system, mesh, load) for load in cases]
    columns = []
    for displacement in solver.solve_cases(constrained):
        field = stresses_at_quadrature(displacement, material)
        mean_stress, mean_strain = field.volume_average()
        columns.append(mean_strain if kind == "neumann" else mean_stress)
    matrix = np.column_stack(columns)
    if kind == "neumann":
        try:
            matrix = np.linalg.inv(matrix)
        except np.linalg.LinAlgError as exc:
            raise HomogenizationError("Averaged compliance is singular") from exc

    scale = float(np.max(np.abs(matrix)))
    asymmetry = float(np.max(np.abs(matrix - matrix.T))) / scale if scale > 0 else 0.0
    if kind != "neumann" and asymmetry > ASYMMETRY_LIMIT:
        LOGGER.warning("%s tensor asymmetry %.2e exceeds %.0e before symmetrization", kind, asymmetry, ASYMMETRY_LIMIT)
    matrix = 0.5 * (matrix + matrix.T)
    if np.min(np.linalg.eigvalsh(matrix)) <= 0:
        raise HomogenizationError(f"{kind} effective tensor is not positive definite; check the coupling setup")
    LOGGER.debug("%s effective tensor diagonal %s", kind, np.round(np.diag(matrix), 6).tolist())
    return ElasticityTensor2D(matrix=matrix, coupling=kind, step=step, asymmetry=asymmetry)


def voigt_bound(grid: PhaseGrid, material: MaterialTable) -> np.ndarray:
    return sum(fraction * material.stiffness(phase) for phase, fraction in grid.volume_fractions().items())


def reuss_bound(grid: PhaseGrid, material: MaterialTable) -> np.ndarray:
    compliance = sum(fraction * np.linalg.inv(material.stiffness(phase)) for phase, fraction in grid.volume_fractions().items())
    return np.linalg.inv(compliance)


def psd_leq(lower: np.ndarray, upper: np.ndarray, tolerance: float = 1e-9) -> bool:
    """True when ``upper - lower`` is positive semidefinite up to a tolerance relative to ``upper``."""
    gap = np.linalg.eigvalsh(0.5 * ((upper - lower) + (upper - lower).T))
    scale = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (upper + upper.T)))))
    return bool(np.min(gap) >= -tolerance * max(scale, 1.0e-300))


def sensitivity_table(tensors: Sequence[ElasticityTensor2D]) -> pd.DataFrame:
    # Each coefficient divided by its value on the first mesh of the sequence.
    if not tensors:
        raise HomogenizationError("No tensors to compare")
    reference = tensors[0].matrix
    magnitude = float(np.max(np.abs(reference)))
    rows = []
    for index, tensor in enumerate(tensors):
        row: Dict[str, object] = {"step": tensor.step if tensor.step is not None else index, "coupling": tensor.coupling}
        for name in COEFFICIENTS:
            i, j = _COEFFICIENT_INDEX[name]
            base, value = reference[i, j], tensor.matrix[i, j]
            if abs(base) < NEGLIGIBLE * magnitude:
                row[name] = 1.0 if abs(value) < NEGLIGIBLE * magnitude else float("nan")
            else:
                row[name] = float(value / base)
        rows.append(row)
    return pd.DataFrame(rows, columns=["step", "coupling", *COEFFICIENTS])


def coarsening_sensitivity(
    meshes: Sequence[QuadMesh],
    material: MaterialTable,
    coupling: str,
    settings: Optional[SolverSettings] = None,
) -> pd.DataFrame:
    if len(meshes) < 2:
        raise HomogenizationError("Coarsening sensitivity needs at least two meshes")
    solver = Solver(settings)
    tensors = [homogenized_tensor(mesh, material, coupling, step=step, solver=solver) for step, mesh in enumerate(meshes)]
    return sensitivity_table(tensors)
