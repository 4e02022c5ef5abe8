import textwrap

import pytest

from mppn import synth

ACCEPTANCE_LINES: list[str] = []

SCHEMA_YAML = """\
columns:
  - {name: case, kind: categorical, level: case, role: case_id}
  - {name: activity, kind: categorical, role: activity}
  - {name: resource, kind: categorical, role: resource}
  - {name: time, kind: temporal, role: timestamp}
  - {name: cost, kind: numerical, level: case}
  - {name: type, kind: categorical, level: case}
"""


@pytest.fixture
def write_log(tmp_path):
    """Write CSV text (dedented) plus the default schema; returns (csv_path, schema_path)."""

    def _write(body: str, schema: str = SCHEMA_YAML):
        log = tmp_path / "log.csv"
        log.write_text(textwrap.dedent(body).lstrip(), encoding="utf-8")
        sch = tmp_path / "schema.yaml"
        sch.write_text(schema, encoding="utf-8")
        return log, sch

    return _write


@pytest.fixture(scope="session")
def groups_log():
    return synth.two_group_log(40, seed=3)


@pytest.fixture
def acceptance_report():
    def _report(criterion: str, passed: bool | None, detail: str = ""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] {criterion}" + (f" ({detail})" if detail else ""))

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
