import pytest

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def record():
    """record(n, ok, detail): collect one line per acceptance criterion check."""

    def add(n: int, ok: bool, detail: str) -> None:
        _CRITERIA.setdefault(n, []).append((bool(ok), detail))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rows = _CRITERIA[n]
        ok = all(r[0] for r in rows)
        detail = "; ".join(d for _, d in rows)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
