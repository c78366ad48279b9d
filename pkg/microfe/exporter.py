from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .fe import DisplacementField, QuadraturePointField
from .mesh import QuadMesh
from .models import ErrorReport

LOGGER = logging.getLogger(__name__)

VTK_QUAD = 9


class ExportError(ValueError):
    """Raised when a snapshot is inconsistent or cannot be written."""


@dataclass
class FieldSnapshot:
    """Named per-element (cell) and per-node (point) arrays over one mesh plus free-form metadata."""

    mesh: QuadMesh
    cell_data: Dict[str, np.ndarray] = field(default_factory=dict)
    point_data: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, values in list(self.cell_data.items()):
            self.cell_data[name] = _checked(name, values, self.mesh.n_elements, "element")
        for name, values in list(self.point_data.items()):
            self.point_data[name] = _checked(name, values, self.mesh.n_nodes, "node")


def _checked(name: str, values: Any, count: int, entity: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or array.shape[0] != count:
        raise ExportError(f"Field '{name}' has {array.shape[0] if array.ndim else 0} entries, mesh has {count} {entity}s")
    if " " in name:
        raise ExportError(f"Field names must not contain spaces: {name!r}")
    return array


def ensure_dir(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)


def snapshot_for(
    mesh: QuadMesh,
    displacement: Optional[DisplacementField] = None,
    field: Optional[QuadraturePointField] = None,
    reports: Sequence[ErrorReport] = (),
    prefix: str = "",
    metadata: Optional[Dict[str, Any]] = None,
    base: Optional[FieldSnapshot] = None,
) -> FieldSnapshot:
    """
    Standard fields of a pipeline step: phase and level always, solution and per-scheme error maps
    when given. ``prefix`` namespaces the solution fields of one coupling; ``base`` is extended.
    """

    def named(key: str) -> str:
        return f"{prefix}_{key}" if prefix else key

    if base is not None:
        cells, points = dict(base.cell_data), dict(base.point_data)
        meta = {**base.metadata, **(metadata or {})}
    else:
        cells = {"phase": mesh.phases.astype(float), "level": mesh.levels.astype(float)}
        points, meta = {}, dict(metadata or {})
    if field is not None:
        centroid_strain = field.strain.mean(axis=1)
        cells[named("strain_xx")] = centroid_strain[:, 0]
        cells[named("strain")] = centroid_strain
        cells[named("stress")] = field.stress.mean(axis=1)
    for report in reports:
        cells[named(f"{report.scheme}_abs_error")] = report.element_errors
        if report.relative_errors is not None:
            cells[named(f"{report.scheme}_rel_error")] = report.relative_errors
    if displacement is not None:
        points[named("displacement")] = displacement.values
    return FieldSnapshot(mesh=mesh, cell_data=cells, point_data=points, metadata=meta)


def _format(values: np.ndarray) -> str:
    return "\n".join(" ".join(format(float(v), ".17g") for v in row) for row in values)


def _data_block(kind: str, data: Dict[str, np.ndarray], count: int) -> list:
    if not data:
        return []
    lines = [f"{kind} {count}"]
    for name, values in data.items():
        if kind == "POINT_DATA" and values.shape[1] == 2:
            lines.append(f"VECTORS {name} double")
            lines.append(_format(np.column_stack([values, np.zeros(values.shape[0])])))
            continue
        lines.append(f"SCALARS {name} double {values.shape[1]}")
        lines.append("LOOKUP_TABLE default")
        lines.append(_format(values))
    return lines


def export_vtk(snapshot: FieldSnapshot, path: Path | str) -> Path:
    """Legacy ASCII VTK unstructured grid of quad cells with cell and point data."""
    mesh = snapshot.mesh
    target = Path(path)
    title = " ".join(f"{key}={value}" for key, value in sorted(snapshot.metadata.items())) or "microfe mesh"
    points = np.column_stack([mesh.positions, np.zeros(mesh.n_nodes)])
    cells = np.column_stack([np.full(mesh.n_elements, 4), mesh.corners])
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
        _format(points),
        f"CELLS {mesh.n_elements} {5 * mesh.n_elements}",
        "\n".join(" ".join(str(int(v)) for v in row) for row in cells),
        f"CELL_TYPES {mesh.n_elements}",
        "\n".join([str(VTK_QUAD)] * mesh.n_elements),
    ]
    lines += _data_block("CELL_DATA", snapshot.cell_data, mesh.n_elements)
    lines += _data_block("POINT_DATA", snapshot.point_data, mesh.n_nodes)
    try:
        ensure_dir(target.parent)
        target.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise ExportError(f"Could not write VTK file {target}: {exc}") from exc
    LOGGER.debug("Wrote VTK: %s", target)
    return target


def _columns(data: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    columns: Dict[str, np.ndarray] = {}
    for name, values in data.items():
        if values.shape[1] == 1:
            columns[name] = values[:, 0]
        else:
            for k in range(values.shape[1]):
                columns[f"{name}_{k}"] = values[:, k]
    return columns


def export_csv(snapshot: FieldSnapshot, path: Path | str, entity: str = "element") -> Path:
    """Flat table: one row per element (or node), multi-component fields split into ``name_k`` columns."""
    target = Path(path)
    data = snapshot.cell_data if entity == "element" else snapshot.point_data
    count = snapshot.mesh.n_elements if entity == "element" else snapshot.mesh.n_nodes
    id_column = f"{entity}_id"
    if data:
        frame = pd.DataFrame({id_column: np.arange(count), **_columns(data)})
    else:
        frame = pd.DataFrame(columns=[id_column])
    try:
        ensure_dir(target.parent)
        frame.to_csv(target, index=False)
    except OSError as exc:
        raise ExportError(f"Could not write CSV file {target}: {exc}") from exc
    LOGGER.debug("Wrote CSV: %s (%s rows)", target, len(frame))
    return target


def export_mesh_json(mesh: QuadMesh, path: Path | str) -> Path:
    target = Path(path)
    ensure_dir(target.parent)
    target.write_text(json.dumps(mesh.to_dict(), indent=2), encoding="utf-8")
    return target


def _to_dataframe(data: Any) -> pd.DataFrame:
    if isinstance(data, pd.DataFrame):
        return data
    if isinstance(data, list) and data and is_dataclass(data[0]):
        return pd.DataFrame([asdict(item) for item in data])
    return pd.DataFrame(data)


def export_dataframe(
    df: pd.DataFrame | Iterable[Dict[str, Any]],
    formats: Iterable[str],
    output_dir: Path,
    stem: str = "summary",
) -> Dict[str, Path]:
    df = _to_dataframe(df)
    ensure_dir(output_dir)
    formats = set(fmt.lower() for fmt in formats)
    base = output_dir / stem
    paths: Dict[str, Path] = {}

    if "csv" in formats:
        csv_path = base.with_suffix(".csv")
        df.to_csv(csv_path, index=False)
        paths["csv"] = csv_path
        LOGGER.info("Exported CSV: %s", csv_path)

    if "excel" in formats or "xlsx" in formats:
        xlsx_path = base.with_suffix(".xlsx")
        try:
            df.to_excel(xlsx_path, index=False, engine="openpyxl")
            paths["excel"] = xlsx_path
            LOGGER.info("Exported Excel: %s", xlsx_path)
        except (ImportError, ValueError, OSError) as exc:
            LOGGER.warning("Failed to write Excel summary %s: %s", xlsx_path, exc)

    if "json" in formats:
        json_path = base.with_suffix(".json")
        df.to_json(json_path, orient="records", indent=2)
        paths["json"] = json_path
        LOGGER.info("Exported JSON: %s", json_path)

    return paths


def write_report_json(payload: Dict[str, Any], output_dir: Path) -> Path:
    ensure_dir(output_dir)
    report_path = output_dir / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False), encoding="utf-8")
    LOGGER.info("Wrote report: %s", report_path)
    return report_path


def write_timings(rows: Iterable[Dict[str, Any]], output_dir: Path) -> Optional[Path]:
    rows = list(rows)
    if not rows:
        return None
    ensure_dir(output_dir)
    timings_path = output_dir / "timings.csv"
    try:
        pd.DataFrame(rows).to_csv(timings_path, index=False)
    except OSError as exc:
        LOGGER.warning("Failed to write timings %s: %s", timings_path, exc)
        return None
    return timings_path
