import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_report import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(RESULTS):
        ok, detail = RESULTS[cid]
        terminalreporter.write_line(f"C{cid:02d} {'PASS' if ok else 'FAIL'}  {detail}")
