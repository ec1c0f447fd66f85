"""Shared fixtures plus a per-criterion verdict line for the release gate."""

import re
import time

import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full pipeline run on the packaged cohort, shared across criteria.

    Returns (RunResult, wall seconds). Built lazily so the rest of the suite
    does not pay for it.
    """
    from valencelab.cli import ExperimentConfig, run_experiment

    out = tmp_path_factory.mktemp("acceptance") / "out"
    config = ExperimentConfig(seed=7, out=str(out))
    t0 = time.perf_counter()
    result = run_experiment(config)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def default_world():
    """Cohort and event stream only, for fault-injection replays."""
    from valencelab.cli import ExperimentConfig, simulate_stage

    config = ExperimentConfig(seed=7, out="unused")
    cohort, events, _ = simulate_stage(config)
    return config, cohort, events


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, ()):
            m = _CRITERION.search(getattr(report, "nodeid", ""))
            if m is None:
                continue
            n = int(m.group(1))
            verdicts[n] = verdicts.get(n, True) and status == "passed"
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        verdict = "PASS" if verdicts[n] else "FAIL"
        terminalreporter.write_line(f"acceptance criterion {n}: {verdict}")
