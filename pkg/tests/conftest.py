import warnings

import numpy as np
import pytest

from sarfusion.data_model import PatchSample

warnings.filterwarnings("ignore", message=".*deterministic.*")

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    # setup/teardown only matter when they fail (e.g. a budget check in a fixture)
    if report.when != "call" and not report.failed:
        return
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    n, title = marker
    prev = _ACCEPTANCE.get(n, (title, "PASS"))[1]
    status = "PASS" if report.passed and prev == "PASS" else "FAIL"
    _ACCEPTANCE[n] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("acceptance")
    if m is not None:
        outcome.get_result()._acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")


def make_sample(seed=0, size=8, labeled=True, sample_id=None, lon=10.0, lat=45.0):
    rng = np.random.default_rng(seed)
    return PatchSample(
        sample_id=sample_id or f"s{seed:04d}",
        lon=lon,
        lat=lat,
        s2=rng.random((12, size, size), dtype=np.float32),
        s1=rng.random((2, size, size), dtype=np.float32),
        lc=rng.integers(1, 6, (size, size), dtype=np.uint8) if labeled else None,
        s2_date="2019-06-01",
        s1_date="2019-06-03",
    )


@pytest.fixture
def sample_factory():
    return make_sample
