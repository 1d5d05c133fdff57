"""Collects acceptance outcomes and prints one line per criterion at the end of the session."""

import pytest

_OUTCOMES: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = getattr(item, "acceptance_detail", "")
    _OUTCOMES.setdefault(marker.kwargs["criterion"], []).append(
        (item.name, "PASS" if rep.passed else "FAIL", detail))


@pytest.fixture
def detail(request):
    """Record a short measurement shown next to the criterion's verdict."""
    def record(text):
        request.node.acceptance_detail = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_OUTCOMES):
        rows = _OUTCOMES[criterion]
        verdict = "PASS" if all(r[1] == "PASS" for r in rows) else "FAIL"
        notes = "; ".join(f"{name}: {status}{f' ({d})' if d else ''}" for name, status, d in rows)
        terminalreporter.write_line(f"criterion {criterion}: {verdict} | {notes}")
