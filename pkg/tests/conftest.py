import numpy as np
import pytest

from vesselfield.geometry import ProjectionGeometry, VolumeGrid


def table1_geometry(rng, det=64, spacing=None):
    """A random RCA-like first view drawn from the clinical ranges, detector scaled to ``det``."""
    du = spacing if spacing is not None else rng.uniform(0.2769, 0.2789) * 512 / det
    return ProjectionGeometry(
        dsd=rng.uniform(970, 1010),
        dso=rng.uniform(745, 785),
        primary_angle=rng.uniform(18, 42),
        secondary_angle=rng.uniform(-8, 8),
        det_u=det,
        det_v=det,
        du=du,
        dv=du,
    )


def orthogonal_pair(det=16, du=None, dsd=1000.0, dso=765.0, extent_mm=None):
    if du is None:
        du = 1.2 * (extent_mm or 16.0) * dsd / dso / det
    return [
        ProjectionGeometry(dsd, dso, 0.0, 0.0, det, det, du, du),
        ProjectionGeometry(dsd, dso, 90.0, 0.0, det, det, du, du),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid8():
    return VolumeGrid(8, 8, 8, 1.0, 1.0, 1.0)


# one pass/fail line per acceptance criterion, shown in the terminal summary
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.fixture
def record(request):
    marker = request.node.get_closest_marker("criterion")

    def _record(ok: bool, detail: str):
        n = marker.args[0]
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and rep.when == "call" and rep.failed and marker.args[0] not in ACCEPTANCE:
        ACCEPTANCE[marker.args[0]] = (False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
