import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from navguard.feed import generate_corpus  # noqa: E402
from navguard.gateway import MockBackend  # noqa: E402
from navguard.spatial import Detection, FrameRecord  # noqa: E402

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"


def det(cls="car", conf=0.9, cx=0.5, cy=0.5, w=0.1, h=0.1):
    return Detection(cls, conf, cx, cy, w, h)


def frame(frame_id=0, *dets, ts=None):
    return FrameRecord(frame_id, frame_id * 33 if ts is None else ts, tuple(dets), "test")


@pytest.fixture(scope="session")
def seed1_corpus():
    return generate_corpus(1, 600, 0.2)


@pytest.fixture
def mock_backend():
    return MockBackend(seed=0)


# -- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Per-test record for an acceptance line; the test body fills in ``detail``."""
    number, title = request.node.get_closest_marker("criterion").args
    rec = _ACCEPTANCE.setdefault(number, {"title": title, "details": [], "outcomes": []})
    mine = {"detail": ""}
    yield mine
    if mine["detail"]:
        rec["details"].append(mine["detail"])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        number, title = marker.args
        rec = _ACCEPTANCE.setdefault(number, {"title": title, "details": [], "outcomes": []})
        rec["outcomes"].append(report.passed)


def _line(number, rec):
    status = "PASS" if rec["outcomes"] and all(rec["outcomes"]) else "FAIL"
    return f"criterion {number:>2} {status}  {rec['title']}  {' '.join(rec['details'])}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_line(number, _ACCEPTANCE[number]))
