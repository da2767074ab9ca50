import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


class Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        _RESULTS[number] = (title, bool(ok), detail)
        return ok


@pytest.fixture(scope="session")
def criterion():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")
