import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        n, title = mark.args
        entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "details": [], "ran": False})
        entry["seconds"] += rep.duration
        if rep.when == "call":
            entry["ran"] = True
            entry["details"] += [v for k, v in item.user_properties if k == "detail"]
        if rep.failed:
            entry["ok"] = False
        if rep.skipped and rep.when != "teardown":
            entry["ok"] = None
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "SKIP" if e["ok"] is None or not e["ran"] and e["ok"] else ("PASS" if e["ok"] else "FAIL")
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] criterion {n}: {e['title']} ({e['seconds']:.1f}s) {detail}".rstrip())
