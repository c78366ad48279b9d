import pytest

from microfe.dataset import REPORT_SCHEMA, build_run_report, parse_run_report


def _row(**overrides):
    row = {"step": 0, "coupling": "periodic", "scheme": "averaging", "ndof": 162, "estimated_error": 0.02}
    row.update(overrides)
    return row


def test_build_and_parse_report():
    payload = build_run_report([_row(), _row(step=1, ndof=50)], run={"algorithm": "soft"}, steps=[{"step": 0}])

    rows, meta = parse_run_report(payload)

    assert [row["ndof"] for row in rows] == [162, 50]
    assert meta["schema"] == REPORT_SCHEMA
    assert meta["run"] == {"algorithm": "soft"}
    assert meta["bounds"] == {}
    assert "generated_at" not in meta


def test_generated_at_only_when_given():
    payload = build_run_report([], run={}, generated_at="2026-01-01T00:00:00+00:00")

    assert payload["generated_at"] == "2026-01-01T00:00:00+00:00"
    assert parse_run_report(payload)[0] == []


@pytest.mark.parametrize(
    "raw",
    [
        [],
        {"schema": "other/1", "summary": []},
        {"schema": REPORT_SCHEMA, "summary": {"step": 0}},
        {"schema": REPORT_SCHEMA, "summary": ["row"]},
    ],
)
def test_parse_rejects_malformed_reports(raw):
    with pytest.raises(ValueError):
        parse_run_report(raw)


def test_parse_rejects_rows_missing_columns():
    row = _row()
    del row["scheme"]

    with pytest.raises(ValueError, match="scheme"):
        parse_run_report({"schema": REPORT_SCHEMA, "summary": [_row(), row]})
