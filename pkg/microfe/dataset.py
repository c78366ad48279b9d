from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Tuple

REPORT_SCHEMA = "microfe.report/1"
SUMMARY_COLUMNS = (
    "step",
    "coupling",
    "scheme",
    "elements",
    "hanging_nodes",
    "ndof",
    "factor",
    "estimated_error",
    "error_factor",
    "interface_error",
    "max_relative_error",
    "true_error",
    "effectivity",
)


def build_run_report(
    summary: Iterable[Dict[str, Any]],
    *,
    run: Dict[str, Any],
    steps: Iterable[Dict[str, Any]] = (),
    tensors: Iterable[Dict[str, Any]] = (),
    sensitivity: Iterable[Dict[str, Any]] = (),
    bounds: Optional[Dict[str, Any]] = None,
    generated_at: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Canonical report.json payload. ``generated_at`` is only written when given so that repeated
    runs of one configuration produce identical files.
    """
    payload: Dict[str, Any] = {
        "schema": REPORT_SCHEMA,
        "run": run,
        "steps": list(steps),
        "summary": list(summary),
        "tensors": list(tensors),
        "sensitivity": list(sensitivity),
        "bounds": bounds or {},
    }
    if generated_at:
        payload["generated_at"] = generated_at
    return payload


def parse_run_report(raw: Any) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    # Returns the summary rows and the remaining report sections.
    if not isinstance(raw, dict):
        raise ValueError("Report JSON must be an object with a 'summary' array.")
    if raw.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"Unsupported report schema: {raw.get('schema')!r}")
    summary = raw.get("summary") or []
    if not isinstance(summary, list):
        raise ValueError("Report field 'summary' must be a list.")
    rows = _validate_rows(summary)
    meta = {key: value for key, value in raw.items() if key != "summary"}
    return rows, meta


def _validate_rows(rows: List[Any]) -> List[Dict[str, Any]]:
    validated: List[Dict[str, Any]] = []
    for index, row in enumerate(rows):
        if not isinstance(row, dict):
            raise ValueError(f"Summary row at index {index} must be an object.")
        missing = [column for column in ("step", "coupling", "scheme", "ndof") if column not in row]
        if missing:
            raise ValueError(f"Summary row at index {index} lacks {', '.join(missing)}.")
        validated.append(row)
    return validated
