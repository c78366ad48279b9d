from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

LOGGER = logging.getLogger(__name__)

ALGORITHMS = ("basic", "hard", "soft")
COUPLINGS = ("dirichlet", "periodic", "neumann")
RECOVERY_SCHEMES = ("standard_spr", "modified_spr", "averaging")
REFINEMENTS = (0, 2, 4, 8, 16)
SUMMARY_FORMATS = ("csv", "excel", "json")
THREADS_ENV = "MF_THREADS"


class ConfigError(Exception):
    """Raised when a configuration file is invalid."""


@dataclass
class SolverSettings:
    direct_limit: int = 500_000
    rtol: float = 1e-10
    max_iterations: Optional[int] = None
    residual_tolerance: float = 1e-8


@dataclass
class InputSettings:
    path: Optional[Path] = None
    palette: Optional[Union[Path, Dict[str, int]]] = None
    synthetic: Optional[str] = None
    synthetic_params: Dict[str, Any] = field(default_factory=dict)
    physical_size: float = 1.0


@dataclass
class RunConfig:
    input: InputSettings
    materials: Dict[int, Dict[str, float]]
    algorithm: str = "soft"
    steps: int = 3
    couplings: List[str] = field(default_factory=lambda: ["periodic"])
    macro_strain: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    macro_stress: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    recovery: List[str] = field(default_factory=lambda: list(RECOVERY_SCHEMES))
    reference_refinement: int = 0
    homogenize: bool = True
    output_dir: Path = Path("outputs/run")
    summary_formats: List[str] = field(default_factory=lambda: ["csv"])
    solver: SolverSettings = field(default_factory=SolverSettings)
    threads: int = 1
    source: Optional[Path] = None


def _load_raw_config(path: Path) -> Dict[str, Any]:
    # Fail early on missing or unsupported files.
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix.lower() in {".yaml", ".yml"}:
            return yaml.safe_load(path.read_text(encoding="utf-8"))
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Could not parse {path}: {exc}") from exc
    raise ConfigError(f"Unsupported config extension: {path.suffix}")


def _require(value: Any, key: str) -> Any:
    if value is None:
        raise ConfigError(f"Missing required config key: {key}")
    return value


def _choice_list(raw: Any, key: str, allowed: tuple, default: List[str]) -> List[str]:
    if raw is None:
        return list(default)
    values = [raw] if isinstance(raw, str) else list(raw)
    if not values:
        raise ConfigError(f"{key} must not be empty")
    unknown = [v for v in values if v not in allowed]
    if unknown:
        raise ConfigError(f"Unsupported {key}: {', '.join(map(str, unknown))} (expected {', '.join(allowed)})")
    return values


def _voigt(raw: Any, key: str, default: List[float]) -> List[float]:
    if raw is None:
        return list(default)
    try:
        values = [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a list of three numbers") from exc
    if len(values) != 3:
        raise ConfigError(f"{key} must be a list of three numbers")
    return values


def _resolve_path(value: str, base: Path) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def _input_settings(raw: Dict[str, Any], base: Path) -> InputSettings:
    physical_size = float(raw.get("physical_size", 1.0))
    if physical_size <= 0:
        raise ConfigError("physical_size must be positive")
    synthetic = raw.get("synthetic")
    if synthetic is not None:
        if isinstance(synthetic, str):
            synthetic = {"kind": synthetic}
        kind = _require(synthetic.get("kind"), "synthetic.kind")
        params = {k: v for k, v in synthetic.items() if k != "kind"}
        return InputSettings(synthetic=kind, synthetic_params=params, physical_size=physical_size)

    path = _resolve_path(_require(raw.get("input"), "input"), base)
    palette_raw = raw.get("palette")
    palette: Optional[Union[Path, Dict[str, int]]] = None
    if isinstance(palette_raw, dict):
        palette = {str(k): int(v) for k, v in palette_raw.items()}
    elif palette_raw is not None:
        palette = _resolve_path(str(palette_raw), base)
    return InputSettings(path=path, palette=palette, physical_size=physical_size)


def _materials(raw: Any) -> Dict[int, Dict[str, float]]:
    materials_raw = _require(raw, "materials")
    if not isinstance(materials_raw, dict) or not materials_raw:
        raise ConfigError("materials must map phase ids to {E, nu}")
    materials: Dict[int, Dict[str, float]] = {}
    for phase, values in materials_raw.items():
        if not isinstance(values, dict) or "E" not in values:
            raise ConfigError(f"Material for phase {phase} must define E (and optionally nu)")
        try:
            materials[int(phase)] = {"E": float(values["E"]), "nu": float(values.get("nu", 0.0))}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Material for phase {phase} must be numeric") from exc
    return materials


def _threads(raw: Any) -> int:
    env_value = os.environ.get(THREADS_ENV)
    value = env_value if env_value not in (None, "") else raw
    try:
        threads = int(value if value is not None else 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"threads must be an integer, got {value!r}") from exc
    return max(1, threads)


def load_config(path: Path | str) -> RunConfig:
    """
    Load and validate a run configuration. Relative input and palette paths are resolved against
    the directory holding the configuration file.
    """
    config_path = Path(path)
    raw = _load_raw_config(config_path) or {}
    if not isinstance(raw, dict):
        raise ConfigError("Top-level configuration must be a mapping")
    base = config_path.parent

    algorithm = raw.get("algorithm", "soft")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"Unsupported algorithm: {algorithm} (expected {', '.join(ALGORITHMS)})")
    steps = int(raw.get("steps", 3))
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    refinement = int(raw.get("reference_refinement", 0))
    if refinement not in REFINEMENTS:
        raise ConfigError(f"reference_refinement must be one of {REFINEMENTS}, got {refinement}")

    solver_raw = raw.get("solver") or {}
    max_iterations = solver_raw.get("max_iterations")
    solver = SolverSettings(
        direct_limit=int(solver_raw.get("direct_limit", 500_000)),
        rtol=float(solver_raw.get("rtol", 1e-10)),
        max_iterations=int(max_iterations) if max_iterations is not None else None,
        residual_tolerance=float(solver_raw.get("residual_tolerance", 1e-8)),
    )

    config = RunConfig(
        input=_input_settings(raw, base),
        materials=_materials(raw.get("materials")),
        algorithm=algorithm,
        steps=steps,
        couplings=_choice_list(raw.get("couplings"), "couplings", COUPLINGS, ["periodic"]),
        macro_strain=_voigt(raw.get("macro_strain"), "macro_strain", [1.0, 0.0, 0.0]),
        macro_stress=_voigt(raw.get("macro_stress"), "macro_stress", [1.0, 0.0, 0.0]),
        recovery=_choice_list(raw.get("recovery"), "recovery", RECOVERY_SCHEMES, list(RECOVERY_SCHEMES)),
        reference_refinement=refinement,
        homogenize=bool(raw.get("homogenize", True)),
        output_dir=Path(raw.get("output_dir", "outputs/run")),
        summary_formats=_choice_list(raw.get("summary_formats"), "summary_formats", SUMMARY_FORMATS, ["csv"]),
        solver=solver,
        threads=_threads(raw.get("threads")),
        source=config_path,
    )
    LOGGER.debug("Loaded run config from %s (%s, %s steps)", config_path, config.algorithm, config.steps)
    return config
