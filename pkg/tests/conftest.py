import numpy as np
import pytest

from hyperdys.backbone import AlexNet, BackboneConfig


@pytest.fixture(scope="session")
def alexnet():
    """A randomly initialized network shared by read-only tests."""
    return AlexNet(BackboneConfig(pretrained=False), seed=0)


@pytest.fixture
def images():
    return np.random.default_rng(0).random((2, 3, 224, 224)).astype(np.float32)


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one of the numbered acceptance criteria")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title} ({seconds:.1f} s)")
