import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from secure_dmpc.scenario import load_config, run_scenario  # noqa: E402

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def benchmark_cfg():
    return load_config()


@pytest.fixture(scope="session")
def benchmark_runs(benchmark_cfg):
    """Nominal, selfish and corrected benchmark runs, shared by every test module."""
    runs = {}
    t0 = time.perf_counter()
    runs["nominal"] = run_scenario(benchmark_cfg, "nominal")
    runs["nominal_seconds"] = time.perf_counter() - t0
    base = runs["nominal"][1]
    runs["selfish"] = run_scenario(benchmark_cfg, "selfish", baseline=base)
    runs["corrected"] = run_scenario(benchmark_cfg, "corrected", baseline=base)
    return runs


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _ACCEPTANCE.get(crit)
        _ACCEPTANCE[crit] = report.outcome if prev in (None, "passed") else prev


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for num, title in CRITERIA.items():
        outcome = _ACCEPTANCE.get(num, "not run")
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{status}] {num}. {title}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
