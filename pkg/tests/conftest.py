import sys
from pathlib import Path

# Make sibling helper modules (boardgen) importable from every test file.
sys.path.insert(0, str(Path(__file__).parent))

# Lines registered by tests/test_acceptance.py, echoed after the run so the
# per-criterion verdicts are visible even when stdout capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
