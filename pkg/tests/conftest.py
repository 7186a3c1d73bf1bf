"""Collects acceptance outcomes and prints one line per criterion at the end."""

import pytest

RESULTS: dict[int, tuple[bool, str, str]] = {}


class Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        RESULTS[number] = (bool(ok), title, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}")
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}")
    passed = sum(ok for ok, _, _ in RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(RESULTS)} criteria pass")
