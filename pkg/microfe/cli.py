from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import pandas as pd

from .config import SUMMARY_FORMATS, ConfigError, RunConfig, load_config
from .dataset import SUMMARY_COLUMNS, build_run_report, parse_run_report
from .estimator import EstimationError, compute_true_error, effectivity_index, estimate_error, reference_run
from .exporter import (
    ExportError,
    export_csv,
    export_dataframe,
    export_mesh_json,
    export_vtk,
    snapshot_for,
    write_report_json,
    write_timings,
)
from .fe import CouplingError, Solver, SolverError, apply_coupling, assemble, stresses_at_quadrature
from .homogenize import (
    VOIGT_NOTE,
    ElasticityTensor2D,
    HomogenizationError,
    homogenized_tensor,
    reuss_bound,
    sensitivity_table,
    voigt_bound,
)
from .material import MacroLoad, MaterialError, MaterialTable
from .mesh import MeshError, QuadMesh, build_uniform_mesh, coarsen, mark, max_hanging_per_edge
from .models import ErrorReport, SolvedRun, SummaryRow
from .phase_grid import PhaseGrid, PhaseGridError, load_palette, load_phase_grid
from .recovery import SingularPatchError, recover
from .synthetic import generate

INPUT_ERRORS = (ConfigError, PhaseGridError, MaterialError, MeshError, CouplingError, ExportError, OSError)
NUMERICAL_ERRORS = (SolverError, SingularPatchError, EstimationError, HomogenizationError)

CONSOLE_FORMAT = "mf %(levelname)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(threadName)s %(name)s %(levelname)s: %(message)s"


def setup_logging(debug: bool, log_file: Path) -> logging.Logger:
    """Attach a console and a DEBUG file handler to the package logger, replacing earlier ones."""
    logger = logging.getLogger(__package__ or "microfe")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    targets = (
        (logging.StreamHandler(sys.stderr), logging.DEBUG if debug else logging.INFO, CONSOLE_FORMAT),
        (logging.FileHandler(log_file, encoding="utf-8"), logging.DEBUG, FILE_FORMAT),
    )
    for handler, level, fmt in targets:
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(fmt, datefmt="%Y-%m-%dT%H:%M:%S"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    return logger


def parse_args(argv: List[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="mf",
        description="Coarsen pixel microstructure meshes, solve the micro problem and estimate discretization errors.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-file", default="outputs/mf.log", help="Path for the log file.")
    common.add_argument("--debug", action="store_true", help="Enable verbose debug logging.")
    common.add_argument("-f", "--format", nargs="+", choices=list(SUMMARY_FORMATS), help="Summary table formats.")

    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "Full pipeline: coarsen, solve, recover, estimate, homogenize, export."),
        ("coarsen", "Coarsening only: write meshes and mesh statistics."),
    ):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("config", help="Path to YAML/JSON run configuration.")
        sub.add_argument("-o", "--output-dir", help="Directory for run artifacts (overrides the config).")
        sub.add_argument("--steps", type=int, help="Number of coarsening steps (overrides the config).")
        sub.add_argument("--algorithm", choices=["basic", "hard", "soft"], help="Coarsening criterion.")

    report = subparsers.add_parser("report", parents=[common], help="Re-render the summary table of a finished run.")
    report.add_argument("directory", help="Run directory holding report.json.")
    return parser.parse_args(argv)


def load_input_grid(config: RunConfig) -> PhaseGrid:
    settings = config.input
    if settings.synthetic:
        params = dict(settings.synthetic_params)
        params.setdefault("physical_size", settings.physical_size)
        return generate(settings.synthetic, params)
    palette = settings.palette
    if isinstance(palette, Path):
        palette = load_palette(palette)
    return load_phase_grid(settings.path, palette=palette, physical_size=settings.physical_size)


def _json_safe(value: Any) -> Any:
    # Plain JSON types only; NaN and infinities become null.
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(float(value)) else None
    return value


@contextmanager
def _context(logger: logging.Logger, step: int, coupling: Optional[str] = None) -> Iterator[None]:
    try:
        yield
    except Exception as exc:
        where = f"step {step}" + (f", coupling {coupling}" if coupling else "")
        logger.error("Failed at %s: %s", where, exc)
        raise


@dataclass
class CouplingResult:
    coupling: str
    run: SolvedRun
    reports: List[ErrorReport] = field(default_factory=list)
    true_error: Optional[float] = None
    tensor: Optional[ElasticityTensor2D] = None
    solve_seconds: float = 0.0


class Pipeline:
    """Sequential coarsening steps; within a step the couplings are processed by a worker pool."""

    def __init__(self, config: RunConfig, logger: Optional[logging.Logger] = None) -> None:
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.output_dir = Path(config.output_dir)
        self.material = MaterialTable.from_mapping(config.materials)
        self.solver = Solver(config.solver, logger=self.logger)
        self.references: Dict[str, SolvedRun] = {}
        self.first_estimates: Dict[tuple, float] = {}

    def load(self, coupling: str) -> MacroLoad:
        return MacroLoad.for_coupling(coupling, macro_strain=self.config.macro_strain, macro_stress=self.config.macro_stress)

    def meshes(self, grid: PhaseGrid) -> Iterator[QuadMesh]:
        # Yields mesh_0 ... mesh_steps lazily so each step's artifacts land before the next coarsening.
        mesh = build_uniform_mesh(grid)
        yield mesh
        for step in range(1, self.config.steps + 1):
            marks = mark(mesh, self.config.algorithm)
            if not marks:
                self.logger.warning("Step %s: no element marked for coarsening", step)
            mesh = coarsen(mesh, marks)
            yield mesh

    def step_info(self, step: int, mesh: QuadMesh, ndof_uniform: int) -> Dict[str, Any]:
        return {
            "step": step,
            "elements": mesh.n_elements,
            "hanging_nodes": mesh.n_hanging,
            "ndof": mesh.ndof,
            "factor": mesh.ndof / ndof_uniform,
            "level_counts": {str(level): count for level, count in mesh.level_counts().items()},
            "max_hanging_per_edge": max_hanging_per_edge(mesh),
        }

    def solve_coupling(self, step: int, mesh: QuadMesh, coupling: str, with_errors: bool) -> CouplingResult:
        with _context(self.logger, step, coupling):
            load = self.load(coupling)
            system = assemble(mesh, self.material)
            displacement = self.solver.solve(apply_coupling(system, mesh, load))
            field_ = stresses_at_quadrature(displacement, self.material)
            result = CouplingResult(
                coupling=coupling,
                run=SolvedRun(mesh=mesh, material=self.material, load=load, displacement=displacement, field=field_),
                solve_seconds=displacement.solve_seconds,
            )
            if with_errors:
                self._estimate(step, result)
            if self.config.homogenize:
                result.tensor = homogenized_tensor(mesh, self.material, coupling, step=step, solver=self.solver)
            return result

    def _estimate(self, step: int, result: CouplingResult) -> None:
        mesh = result.run.mesh
        ndof_uniform = 2 * (mesh.grid.width + 1) ** 2
        if self.config.reference_refinement:
            reference = self.references.get(result.coupling)
            if reference is None:
                reference = reference_run(
                    mesh, self.material, result.run.load, self.config.reference_refinement, self.config.solver
                )
                self.references[result.coupling] = reference
            result.true_error = compute_true_error(result.run, reference)
        for scheme in self.config.recovery:
            recovered = recover(mesh, result.run.field, scheme)
            report = estimate_error(mesh, result.run.field, recovered, ndof_uniform=ndof_uniform, material=self.material)
            if result.true_error is not None:
                theta = effectivity_index(report.total_estimated, result.true_error) if result.true_error > 0 else None
                report = report.with_true_error(result.true_error, theta)
            result.reports.append(report)
            self.logger.info(
                "Step %s %s %s: estimated error %.6e%s",
                step,
                result.coupling,
                scheme,
                report.total_estimated,
                f", effectivity {report.effectivity:.4f}" if report.effectivity is not None else "",
            )

    def run_step(self, step: int, mesh: QuadMesh, with_errors: bool) -> List[CouplingResult]:
        couplings = list(self.config.couplings)
        workers = min(self.config.threads, len(couplings))
        if workers <= 1:
            return [self.solve_coupling(step, mesh, coupling, with_errors) for coupling in couplings]

        self.logger.debug("Step %s: %s couplings on %s workers", step, len(couplings), workers)
        results: List[Optional[CouplingResult]] = [None] * len(couplings)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_index = {
                executor.submit(self.solve_coupling, step, mesh, coupling, with_errors): index
                for index, coupling in enumerate(couplings)
            }
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()
        return [result for result in results if result is not None]

    def summary_rows(self, step: int, mesh: QuadMesh, results: List[CouplingResult]) -> List[SummaryRow]:
        rows: List[SummaryRow] = []
        for result in results:
            for report in result.reports:
                key = (result.coupling, report.scheme)
                first = self.first_estimates.setdefault(key, report.total_estimated)
                rows.append(
                    SummaryRow(
                        step=step,
                        coupling=result.coupling,
                        scheme=report.scheme,
                        elements=mesh.n_elements,
                        hanging_nodes=mesh.n_hanging,
                        ndof=mesh.ndof,
                        factor=report.reduction_factor,
                        estimated_error=report.total_estimated,
                        error_factor=report.total_estimated / first if first > 0 else 1.0,
                        interface_error=report.interface_error,
                        max_relative_error=report.max_relative_error,
                        true_error=report.total_true,
                        effectivity=report.effectivity,
                    )
                )
        return rows

    def write_step(self, step: int, mesh: QuadMesh, results: List[CouplingResult]) -> None:
        snapshot = snapshot_for(mesh, metadata={"step": step, "algorithm": self.config.algorithm})
        for result in results:
            snapshot = snapshot_for(
                mesh,
                displacement=result.run.displacement,
                field=result.run.field,
                reports=result.reports,
                prefix=result.coupling,
                base=snapshot,
            )
        export_vtk(snapshot, self.output_dir / f"mesh_step{step}.vtk")
        export_csv(snapshot, self.output_dir / f"elements_step{step}.csv")
        export_mesh_json(mesh, self.output_dir / f"mesh_step{step}.json")

    def run(self, grid: PhaseGrid, with_errors: bool = True) -> Dict[str, Any]:
        self.material.require(grid.phases)
        ndof_uniform = 2 * (grid.width + 1) ** 2
        steps: List[Dict[str, Any]] = []
        summary: List[SummaryRow] = []
        tensors: Dict[str, List[ElasticityTensor2D]] = {}
        timings: List[Dict[str, Any]] = []

        for step, mesh in enumerate(self.meshes(grid)):
            info = self.step_info(step, mesh, ndof_uniform)
            steps.append(info)
            self.logger.info(
                "Step %s: %s elements, %s hanging nodes, ndof %s (factor %.4f)",
                step,
                mesh.n_elements,
                mesh.n_hanging,
                mesh.ndof,
                info["factor"],
            )
            if not with_errors:
                export_vtk(snapshot_for(mesh, metadata={"step": step}), self.output_dir / f"mesh_step{step}.vtk")
                export_mesh_json(mesh, self.output_dir / f"mesh_step{step}.json")
                continue
            results = self.run_step(step, mesh, with_errors)
            summary.extend(self.summary_rows(step, mesh, results))
            for result in results:
                timings.append({"step": step, "coupling": result.coupling, "ndof": mesh.ndof, "solve_seconds": result.solve_seconds})
                if result.tensor is not None:
                    tensors.setdefault(result.coupling, []).append(result.tensor)
            self.write_step(step, mesh, results)

        sensitivity: List[Dict[str, Any]] = []
        for coupling, sequence in tensors.items():
            if len(sequence) >= 2:
                sensitivity.extend(sensitivity_table(sequence).to_dict(orient="records"))
        bounds = {}
        if self.config.homogenize and with_errors:
            bounds = {"voigt": voigt_bound(grid, self.material), "reuss": reuss_bound(grid, self.material)}

        payload = build_run_report(
            [asdict(row) for row in summary],
            run=self.run_info(grid),
            steps=steps,
            tensors=[tensor.as_dict() for sequence in tensors.values() for tensor in sequence],
            sensitivity=sensitivity,
            bounds=bounds,
        )
        write_timings(timings, self.output_dir)
        return _json_safe(payload)

    def run_info(self, grid: PhaseGrid) -> Dict[str, Any]:
        settings = self.config.input
        return {
            "input": settings.synthetic or (settings.path.name if settings.path else None),
            "grid_size": grid.width,
            "physical_size": grid.physical_size,
            "volume_fractions": {str(k): v for k, v in grid.volume_fractions().items()},
            "materials": {str(k): v for k, v in sorted(self.config.materials.items())},
            "algorithm": self.config.algorithm,
            "steps": self.config.steps,
            "couplings": list(self.config.couplings),
            "recovery": list(self.config.recovery),
            "reference_refinement": self.config.reference_refinement,
            "macro_strain": list(self.config.macro_strain),
            "macro_stress": list(self.config.macro_stress),
            "convention": VOIGT_NOTE,
        }


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "output_dir", None):
        config.output_dir = Path(args.output_dir)
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        config.steps = args.steps
    if getattr(args, "algorithm", None):
        config.algorithm = args.algorithm
    if args.format:
        config.summary_formats = list(args.format)
    return config


def summary_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    columns = [column for column in SUMMARY_COLUMNS if column in frame.columns]
    return frame[columns] if columns else frame


def _report(args: argparse.Namespace, logger: logging.Logger) -> int:
    directory = Path(args.directory)
    report_path = directory / "report.json"
    if not report_path.exists():
        logger.error("No report.json in %s", directory)
        return 1
    try:
        rows, _ = parse_run_report(json.loads(report_path.read_text(encoding="utf-8")))
    except ValueError as exc:
        logger.error("Invalid report %s: %s", report_path, exc)
        return 1
    frame = summary_frame(rows)
    sys.stdout.write(frame.to_string(index=False) + "\n")
    export_dataframe(frame, args.format or ["csv"], output_dir=directory)
    return 0


def run(argv: List[str] | None = None) -> int:
    args = parse_args(argv)
    log_file = Path(args.log_file)
    log_file.parent.mkdir(parents=True, exist_ok=True)
    logger = setup_logging(debug=args.debug, log_file=log_file)

    if args.command == "report":
        return _report(args, logger)

    try:
        config = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return 1

    try:
        grid = load_input_grid(config)
        pipeline = Pipeline(config, logger=logger)
        logger.info("Starting %s on %sx%s grid with phases %s", args.command, grid.width, grid.height, grid.phases)
        payload = pipeline.run(grid, with_errors=args.command == "run")
    except NUMERICAL_ERRORS as exc:
        logger.error("Numerical failure: %s", exc)
        return 2
    except INPUT_ERRORS as exc:
        logger.error("Input error: %s", exc)
        return 1

    output_dir = Path(config.output_dir)
    if args.command == "coarsen":
        frame = pd.DataFrame(payload["steps"]).drop(columns=["level_counts"])
        export_dataframe(frame, config.summary_formats, output_dir=output_dir, stem="mesh_summary")
        logger.info("Wrote %s meshes to %s", len(payload["steps"]), output_dir)
        return 0

    write_report_json(payload, output_dir)
    frame = summary_frame(payload["summary"])
    exported = export_dataframe(frame, config.summary_formats, output_dir=output_dir)
    logger.info("Exported files: %s", ", ".join(str(p) for p in exported.values()))
    return 0


def main() -> int:
    return run()


if __name__ == "__main__":
    raise SystemExit(main())
