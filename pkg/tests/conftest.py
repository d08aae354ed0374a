import pytest

from detmoe.synth import SynthSpec, synth_dataset

ACCEPTANCE_RESULTS: dict[int, bool] = {}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 2 x 12 image synthetic set with a few ambiguous images."""
    root = tmp_path_factory.mktemp("synth")
    synth_dataset(SynthSpec(images_per_domain=12, ambiguous_images=4, seed=11), root)
    return root


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    crit = mark.args[0]
    ACCEPTANCE_RESULTS[crit] = ACCEPTANCE_RESULTS.get(crit, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ACCEPTANCE_RESULTS[crit] else "FAIL"
        terminalreporter.write_line(f"criterion {crit:2d}: {status}")
