import json

import numpy as np
import pandas as pd
import pytest

from microfe.exporter import (
    ExportError,
    FieldSnapshot,
    export_csv,
    export_dataframe,
    export_mesh_json,
    export_vtk,
    snapshot_for,
    write_report_json,
)
from microfe.fe import solve_load
from microfe.material import MacroLoad
from microfe.mesh import build_uniform_mesh, coarsen, coarsen_pipeline
from microfe.phase_grid import PhaseGrid
from microfe.synthetic import cross


def _read_vtk(path):
    # Minimal legacy-VTK reader: point/cell counts, connectivity and named arrays.
    lines = path.read_text(encoding="ascii").splitlines()
    parsed = {"cell_data": {}, "point_data": {}}
    section = None
    i = 0
    while i < len(lines):
        tokens = lines[i].split()
        if tokens and tokens[0] == "POINTS":
            count = int(tokens[1])
            parsed["points"] = np.array([[float(v) for v in row.split()] for row in lines[i + 1 : i + 1 + count]])
            i += count
        elif tokens and tokens[0] == "CELLS":
            count = int(tokens[1])
            parsed["cells"] = [[int(v) for v in row.split()] for row in lines[i + 1 : i + 1 + count]]
            i += count
        elif tokens and tokens[0] == "CELL_TYPES":
            count = int(tokens[1])
            parsed["cell_types"] = [int(v) for v in lines[i + 1 : i + 1 + count]]
            i += count
        elif tokens and tokens[0] in ("CELL_DATA", "POINT_DATA"):
            section = "cell_data" if tokens[0] == "CELL_DATA" else "point_data"
            parsed[section + "_count"] = int(tokens[1])
        elif tokens and tokens[0] in ("SCALARS", "VECTORS"):
            count = parsed[section + "_count"]
            offset = 2 if tokens[0] == "SCALARS" else 1
            rows = lines[i + offset : i + offset + count]
            parsed[section][tokens[1]] = np.array([[float(v) for v in row.split()] for row in rows])
            i += offset - 1 + count
        i += 1
    return parsed


def test_single_element_vtk(tmp_path):
    mesh = build_uniform_mesh(PhaseGrid(np.zeros((1, 1), dtype=int)))

    path = export_vtk(FieldSnapshot(mesh=mesh), tmp_path / "one.vtk")

    parsed = _read_vtk(path)
    assert parsed["points"].shape == (4, 3)
    assert parsed["cells"] == [[4, 2, 3, 1, 0]]
    assert parsed["cell_types"] == [9]
    assert parsed["cell_data"] == {}


def test_hanging_mesh_vtk_round_trip(tmp_path):
    mesh = coarsen(build_uniform_mesh(PhaseGrid(np.zeros((3, 3), dtype=int))), {0, 1, 3, 4})
    values = np.linspace(0.0, 1.0, mesh.n_elements) / 3.0
    displacement = np.column_stack([np.arange(mesh.n_nodes), -np.arange(mesh.n_nodes)]) * 0.1

    snapshot = FieldSnapshot(mesh=mesh, cell_data={"error": values}, point_data={"displacement": displacement})
    parsed = _read_vtk(export_vtk(snapshot, tmp_path / "mesh.vtk"))

    assert parsed["points"].shape == (13, 3)
    assert len(parsed["cells"]) == 6
    assert all(row[0] == 4 for row in parsed["cells"])
    assert np.array_equal(parsed["cell_data"]["error"][:, 0], values)
    assert np.array_equal(parsed["point_data"]["displacement"][:, :2], displacement)
    assert np.allclose(parsed["points"][:, :2], mesh.positions)


def test_pipeline_mesh_cell_count(tmp_path, two_phase_material):
    mesh = coarsen_pipeline(cross(size=32), algorithm="soft", steps=2)[-1]
    displacement, field = solve_load(mesh, two_phase_material, MacroLoad("periodic", macro_strain=[1.0, 0.0, 0.0]))

    snapshot = snapshot_for(mesh, displacement=displacement, field=field, metadata={"step": 2})
    parsed = _read_vtk(export_vtk(snapshot, tmp_path / "step.vtk"))

    assert len(parsed["cells"]) == mesh.n_elements
    assert parsed["cell_data"]["stress"].shape == (mesh.n_elements, 3)
    assert parsed["point_data"]["displacement"].shape == (mesh.n_nodes, 3)


def test_csv_without_fields_is_header_only(tmp_path):
    mesh = build_uniform_mesh(PhaseGrid(np.zeros((2, 2), dtype=int)))

    path = export_csv(FieldSnapshot(mesh=mesh), tmp_path / "empty.csv")

    assert path.read_text(encoding="utf-8").strip() == "element_id"


def test_csv_round_trip_keeps_values(tmp_path):
    mesh = coarsen_pipeline(cross(size=16), algorithm="hard", steps=1)[-1]
    rng = np.random.default_rng(7)
    errors = rng.random(mesh.n_elements) * 1e-3
    stress = rng.normal(size=(mesh.n_elements, 3))

    path = export_csv(FieldSnapshot(mesh=mesh, cell_data={"abs_error": errors, "stress": stress}), tmp_path / "elements.csv")

    frame = pd.read_csv(path)
    assert len(frame) == mesh.n_elements
    assert list(frame.columns) == ["element_id", "abs_error", "stress_0", "stress_1", "stress_2"]
    assert np.allclose(frame["abs_error"].to_numpy(), errors, rtol=1e-12, atol=0.0)
    assert np.allclose(frame[["stress_0", "stress_1", "stress_2"]].to_numpy(), stress, rtol=1e-12, atol=0.0)


def test_snapshot_rejects_bad_fields():
    mesh = build_uniform_mesh(PhaseGrid(np.zeros((2, 2), dtype=int)))

    with pytest.raises(ExportError):
        FieldSnapshot(mesh=mesh, cell_data={"error": np.zeros(3)})
    with pytest.raises(ExportError):
        FieldSnapshot(mesh=mesh, cell_data={"abs error": np.zeros(4)})


def test_mesh_json_lists_hanging_nodes(tmp_path):
    mesh = coarsen(build_uniform_mesh(PhaseGrid(np.zeros((3, 3), dtype=int))), {0, 1, 3, 4})

    payload = json.loads(export_mesh_json(mesh, tmp_path / "mesh.json").read_text(encoding="utf-8"))

    hanging = [node for node in payload["nodes"] if node["kind"] == "hanging"]
    assert len(hanging) == 2
    assert all(len(node["masters"]) == 2 for node in hanging)
    assert payload["ndof"] == 22


def test_export_creates_files(tmp_path):
    # Verify export writes chosen formats and files are present.
    rows = [
        {"step": 0, "coupling": "periodic", "scheme": "averaging", "ndof": 32},
        {"step": 1, "coupling": "periodic", "scheme": "averaging", "ndof": 22},
    ]

    paths = export_dataframe(rows, formats=["csv", "json"], output_dir=tmp_path)

    assert "csv" in paths and paths["csv"].exists()
    assert "json" in paths and paths["json"].exists()
    assert pd.read_csv(paths["csv"])["ndof"].tolist() == [32, 22]


def test_report_json_is_sorted_and_strict(tmp_path):
    path = write_report_json({"b": 1, "a": [1.5]}, tmp_path)

    assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')
    with pytest.raises(ValueError):
        write_report_json({"a": float("nan")}, tmp_path)
