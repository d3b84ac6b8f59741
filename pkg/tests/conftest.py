import numpy as np
import pytest

from aewin.attention import AewinConfig, AttentionWeights
from aewin.backbone import PRESETS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    return PRESETS["aewin-toy"]


@pytest.fixture
def small_config():
    return AewinConfig(channels=8, heads=4, window=2)


@pytest.fixture
def small_weights(rng):
    return AttentionWeights.random(8, rng)


# one pass/fail line per acceptance criterion, printed after the run
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] &= report.passed
    if report.when == "call":
        detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        entry["details"].append(f"{item.name}: {'ok' if report.passed else 'FAILED'}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        tr.write_line(f"criterion {number} [{entry['title']}]: {'PASS' if entry['passed'] else 'FAIL'}")
        for line in entry["details"]:
            tr.write_line(f"    {line}")
