import json
import logging
import textwrap

import numpy as np
import pandas as pd
import pytest

from microfe.cli import parse_args, run, setup_logging
from microfe.mesh import coarsen_pipeline
from microfe.synthetic import laminate

LAMINATE_CONFIG = """
synthetic:
  kind: laminate
  size: 8
  fraction: 0.5
materials:
  0: {E: 250000, nu: 0.3}
  1: {E: 775000, nu: 0.3}
algorithm: hard
steps: 1
couplings: [dirichlet, periodic]
macro_strain: [0.0, 0.0, 0.001]
recovery: [standard_spr, modified_spr, averaging]
reference_refinement: 2
threads: 2
summary_formats: [csv, json]
"""


def _config(tmp_path, body=LAMINATE_CONFIG, name="run.yaml"):
    cfg = tmp_path / name
    cfg.write_text(textwrap.dedent(body), encoding="utf-8")
    return cfg


def _micrograph(tmp_path, values, palette_text):
    values = np.asarray(values, dtype=np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    (tmp_path / "micrograph.pgm").write_bytes(header + values.tobytes())
    (tmp_path / "palette.txt").write_text(palette_text, encoding="utf-8")
    return _config(
        tmp_path,
        """
        input: micrograph.pgm
        palette: palette.txt
        materials:
          0: {E: 1.0, nu: 0.2}
          1: {E: 5.0, nu: 0.2}
        steps: 1
        """,
    )


def test_parse_args_defaults():
    args = parse_args(["run", "cfg.yaml"])

    assert args.command == "run"
    assert args.log_file == "outputs/mf.log"
    assert args.output_dir is None and args.steps is None


def test_setup_logging_replaces_handlers_on_the_package_logger(tmp_path):
    first = setup_logging(False, tmp_path / "a.log")
    logger = setup_logging(True, tmp_path / "b.log")
    try:
        logging.getLogger("microfe.fe").debug("assembled %d dofs", 8)
        for handler in logger.handlers:
            handler.flush()

        assert logger is first and logger.name == "microfe"
        assert len(logger.handlers) == 2 and not logger.propagate
        assert "MainThread microfe.fe DEBUG: assembled 8 dofs" in (tmp_path / "b.log").read_text(encoding="utf-8")
        assert (tmp_path / "a.log").read_text(encoding="utf-8") == ""
    finally:
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    log = tmp_path / "mf.log"

    code = run(["run", str(_config(tmp_path)), "-o", str(out), "--log-file", str(log)])

    assert code == 0
    for name in ("report.json", "summary.csv", "summary.json", "timings.csv", "mesh_step0.vtk", "mesh_step1.vtk"):
        assert (out / name).exists(), name
    elements = pd.read_csv(out / "elements_step1.csv")
    assert "dirichlet_modified_spr_abs_error" in elements.columns
    assert len(elements) == 40

    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["run"]["couplings"] == ["dirichlet", "periodic"]
    meshes = coarsen_pipeline(laminate(size=8, fraction=0.5), algorithm="hard", steps=1)
    assert [step["ndof"] for step in report["steps"]] == [mesh.ndof for mesh in meshes]
    assert report["steps"][0]["ndof"] == 162 and meshes[1].n_elements == 40
    assert len(report["summary"]) == 2 * 2 * 3
    assert {row["coupling"] for row in report["sensitivity"]} == {"dirichlet", "periodic"}
    dirichlet = [row for row in report["summary"] if row["coupling"] == "dirichlet"]
    assert all(row["true_error"] > 0 and row["effectivity"] > 0 for row in dirichlet)
    assert "Step 1" in log.read_text(encoding="utf-8")


def test_run_is_reproducible(tmp_path):
    cfg = _config(tmp_path)
    first, second = tmp_path / "first", tmp_path / "second"

    assert run(["run", str(cfg), "-o", str(first), "--log-file", str(tmp_path / "a.log")]) == 0
    assert run(["run", str(cfg), "-o", str(second), "--log-file", str(tmp_path / "b.log")]) == 0

    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_run_with_unknown_color_fails(tmp_path):
    cfg = _micrograph(tmp_path, [[0, 0], [128, 255]], "0 0\n255 1\n")

    code = run(["run", str(cfg), "-o", str(tmp_path / "out"), "--log-file", str(tmp_path / "mf.log")])

    assert code == 1
    assert not (tmp_path / "out" / "report.json").exists()


def test_run_with_invalid_palette_fails(tmp_path):
    cfg = _micrograph(tmp_path, [[0, 0], [255, 255]], "0 0 extra\n")

    code = run(["run", str(cfg), "-o", str(tmp_path / "out"), "--log-file", str(tmp_path / "mf.log")])

    assert code == 1
    assert "palette" in (tmp_path / "mf.log").read_text(encoding="utf-8").lower()


def test_run_with_invalid_config_fails(tmp_path):
    cfg = _config(tmp_path, "algorithm: greedy\n")

    assert run(["run", str(cfg), "--log-file", str(tmp_path / "mf.log")]) == 1


def test_report_rerenders_summary(tmp_path, capsys):
    out = tmp_path / "out"
    log = str(tmp_path / "mf.log")
    assert run(["run", str(_config(tmp_path)), "-o", str(out), "--log-file", log]) == 0
    (out / "summary.csv").unlink()

    code = run(["report", str(out), "--log-file", log])

    assert code == 0
    assert "estimated_error" in capsys.readouterr().out
    assert len(pd.read_csv(out / "summary.csv")) == 12


def test_report_without_run_fails(tmp_path):
    assert run(["report", str(tmp_path), "--log-file", str(tmp_path / "mf.log")]) == 1


def test_coarsen_writes_mesh_summary(tmp_path):
    out = tmp_path / "meshes"

    code = run(["coarsen", str(_config(tmp_path)), "-o", str(out), "--steps", "3", "--log-file", str(tmp_path / "mf.log")])

    assert code == 0
    summary = pd.read_csv(out / "mesh_summary.csv")
    assert summary["step"].tolist() == [0, 1, 2, 3]
    assert summary["ndof"].is_monotonic_decreasing
    assert (out / "mesh_step3.vtk").exists()
    assert not (out / "report.json").exists()


CROSS_CONFIG = """
synthetic:
  kind: cross
  size: 128
materials:
  0: {E: 250000, nu: 0.3}
  1: {E: 775000, nu: 0.3}
algorithm: soft
steps: 3
couplings: [periodic]
macro_strain: [0.001, 0.0, 0.0]
recovery: [modified_spr, averaging]
homogenize: false
"""


@pytest.mark.slow
def test_cross_coarsening_trades_dofs_for_error(tmp_path):
    out = tmp_path / "cross"

    code = run(["run", str(_config(tmp_path, CROSS_CONFIG)), "-o", str(out), "--log-file", str(tmp_path / "mf.log")])

    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    assert 0.08 <= summary.loc[summary["step"] == 3, "factor"].iloc[0] <= 0.20
    for _, rows in summary.groupby("scheme"):
        factors = rows.sort_values("step")["error_factor"].to_numpy()
        assert factors[0] == 1.0
        assert np.all(np.diff(factors) >= 0.0)
