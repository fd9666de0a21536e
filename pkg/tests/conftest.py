from __future__ import annotations

import json
from pathlib import Path

import pytest

REPORT_PATH = Path(__file__).resolve().parent.parent / "acceptance_report.json"

_results: dict[int, dict] = {}


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number: int, title: str, ok: bool, detail: str = "", data=None) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        print(line)
        _results[number] = {"title": title, "ok": bool(ok), "detail": detail, "line": line, "data": data}
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        terminalreporter.write_line(_results[n]["line"])
    REPORT_PATH.write_text(json.dumps({str(k): v for k, v in sorted(_results.items())}, indent=2, default=float))
    terminalreporter.write_line(f"details written to {REPORT_PATH.name}")
