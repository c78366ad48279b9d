from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

COUPLINGS = ("dirichlet", "periodic", "neumann")
_COUPLING_ALIASES = {"dirichlet_kubc": "dirichlet", "kubc": "dirichlet", "pbc": "periodic"}

BodyForce = Callable[[np.ndarray, np.ndarray], np.ndarray]


class MaterialError(ValueError):
    """Raised for invalid elastic constants or load cases."""


@dataclass(frozen=True)
class PhaseMaterial:
    young_modulus: float
    poisson_ratio: float

    def __post_init__(self) -> None:
        if not self.young_modulus > 0:
            raise MaterialError(f"Young's modulus must be positive, got {self.young_modulus}")
        if not 0 <= self.poisson_ratio < 0.5:
            raise MaterialError(f"Poisson ratio must lie in [0, 0.5), got {self.poisson_ratio}")

    @property
    def stiffness(self) -> np.ndarray:
        """Plane-strain Voigt stiffness with engineering shear strain."""
        e, nu = self.young_modulus, self.poisson_ratio
        factor = e / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return factor * np.array(
            [
                [1.0 - nu, nu, 0.0],
                [nu, 1.0 - nu, 0.0],
                [0.0, 0.0, (1.0 - 2.0 * nu) / 2.0],
            ]
        )


@dataclass(frozen=True)
class MaterialTable:
    phases: Dict[int, PhaseMaterial]

    def __post_init__(self) -> None:
        if not self.phases:
            raise MaterialError("Material table needs at least one phase")

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "MaterialTable":
        # Accepts {phase: {E, nu}} as read from a run configuration.
        phases: Dict[int, PhaseMaterial] = {}
        for phase, values in raw.items():
            try:
                phases[int(phase)] = PhaseMaterial(float(values["E"]), float(values.get("nu", 0.0)))
            except (KeyError, TypeError) as exc:
                raise MaterialError(f"Phase {phase!r} needs numeric 'E' and 'nu'") from exc
        return cls(phases=phases)

    def stiffness(self, phase: int) -> np.ndarray:
        try:
            return self.phases[int(phase)].stiffness
        except KeyError as exc:
            raise MaterialError(f"No material defined for phase {phase}") from exc

    def stiffness_stack(self, phases: np.ndarray) -> np.ndarray:
        # (n, 3, 3) array of D for each entry of ``phases``.
        ids = sorted(self.phases)
        table = np.stack([self.phases[p].stiffness for p in ids])
        lookup = {p: k for k, p in enumerate(ids)}
        self.require(np.unique(phases).tolist())
        return table[np.array([lookup[int(p)] for p in phases], dtype=np.int64)]

    def require(self, phases: Iterable[int]) -> None:
        missing = sorted(set(int(p) for p in phases) - set(self.phases))
        if missing:
            raise MaterialError(f"Material table lacks phases: {missing}")


def voigt(values: Optional[Sequence[float]]) -> Optional[np.ndarray]:
    if values is None:
        return None
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.shape != (3,):
        raise MaterialError(f"Voigt quantities need three components, got {list(values)}")
    return array


def strain_tensor(strain: np.ndarray) -> np.ndarray:
    # Voigt with engineering shear to the symmetric 2x2 tensor.
    return np.array([[strain[0], strain[2] / 2.0], [strain[2] / 2.0, strain[1]]])


def stress_tensor(stress: np.ndarray) -> np.ndarray:
    return np.array([[stress[0], stress[2]], [stress[2], stress[1]]])


@dataclass(frozen=True)
class MacroLoad:
    """One micro load case: a macro strain for dirichlet/periodic coupling, a macro stress for neumann."""

    kind: str
    macro_strain: Optional[np.ndarray] = None
    macro_stress: Optional[np.ndarray] = None
    body_force: Optional[BodyForce] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        kind = _COUPLING_ALIASES.get(self.kind, self.kind)
        if kind not in COUPLINGS:
            raise MaterialError(f"Unknown coupling: {self.kind}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "macro_strain", voigt(self.macro_strain))
        object.__setattr__(self, "macro_stress", voigt(self.macro_stress))
        if kind == "neumann":
            if self.macro_stress is None or self.macro_strain is not None:
                raise MaterialError("Neumann coupling takes macro_stress only")
        elif self.macro_strain is None or self.macro_stress is not None:
            raise MaterialError(f"{kind} coupling takes macro_strain only")

    @classmethod
    def for_coupling(
        cls,
        kind: str,
        macro_strain: Optional[Sequence[float]] = None,
        macro_stress: Optional[Sequence[float]] = None,
        body_force: Optional[BodyForce] = None,
    ) -> "MacroLoad":
        # Picks the active quantity for the coupling so one config can drive all three couplings.
        kind = _COUPLING_ALIASES.get(kind, kind)
        if kind == "neumann":
            return cls(kind, macro_stress=macro_stress if macro_stress is not None else (1.0, 0.0, 0.0), body_force=body_force)
        return cls(kind, macro_strain=macro_strain if macro_strain is not None else (1.0, 0.0, 0.0), body_force=body_force)

    def macro_displacement(self, positions: np.ndarray) -> np.ndarray:
        # u = eps . x for every row of ``positions``.
        eps = strain_tensor(self.macro_strain if self.macro_strain is not None else np.zeros(3))
        return positions @ eps.T
