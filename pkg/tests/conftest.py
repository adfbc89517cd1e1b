import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


def record_acceptance(n, ok, detail):
    _ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    print(_ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
