from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .fe import DisplacementField, QuadraturePointField
from .material import MacroLoad, MaterialTable
from .mesh import QuadMesh


@dataclass
class SolvedRun:
    # One solved micro problem: everything estimation and export need.
    mesh: QuadMesh
    material: MaterialTable
    load: MacroLoad
    displacement: DisplacementField
    field: QuadraturePointField


@dataclass
class ErrorReport:
    scheme: str
    element_errors: np.ndarray
    element_energy: np.ndarray
    total_estimated: float
    ndof: int
    ndof_uniform: int
    interface_error: float = 0.0
    relative_errors: Optional[np.ndarray] = None
    zero_energy: Optional[np.ndarray] = None
    total_true: Optional[float] = None
    effectivity: Optional[float] = None

    @property
    def reduction_factor(self) -> float:
        return self.ndof / self.ndof_uniform if self.ndof_uniform else 1.0

    @property
    def max_relative_error(self) -> float:
        if self.relative_errors is None or self.relative_errors.size == 0:
            return 0.0
        return float(np.max(self.relative_errors))

    @property
    def max_relative_element(self) -> Optional[int]:
        if self.relative_errors is None or self.relative_errors.size == 0:
            return None
        return int(np.argmax(self.relative_errors))

    def with_true_error(self, total_true: float, effectivity: Optional[float]) -> "ErrorReport":
        return replace(self, total_true=total_true, effectivity=effectivity)


@dataclass
class SummaryRow:
    # One line of the per-run summary table (step x coupling x scheme).
    step: int
    coupling: str
    scheme: str
    elements: int
    hanging_nodes: int
    ndof: int
    factor: float
    estimated_error: float
    error_factor: float
    interface_error: float
    max_relative_error: float
    true_error: Optional[float] = None
    effectivity: Optional[float] = None
