import re

import pytest

from prodsys.deft import Request, builtin_templates, compile_request
from prodsys.gridsim import FailureModel, Site

_ACCEPT = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _ACCEPT.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2)
    if report.when != "call" and report.outcome == "passed":
        return
    status = "PASS" if report.outcome == "passed" else "FAIL"
    prev = _results.get(n)
    if prev is None or (status == "FAIL" and prev[0] == "PASS"):
        _results[n] = (status, name.replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name}")


@pytest.fixture
def registry():
    return builtin_templates()


@pytest.fixture
def reco_request():
    return Request("r1", "reco-chain", {"input": "data.RAW", "input_events": "1000"})


@pytest.fixture
def reco_workflow(reco_request, registry):
    return compile_request(reco_request, registry)


@pytest.fixture
def clean_site():
    return Site("A", cores=4, speed_factor=1.0)


@pytest.fixture
def flaky_sites():
    return [
        Site("fast", cores=8, speed_factor=2.0, failure=FailureModel(p_transient=0.1), max_job_events=50),
        Site("slow", cores=4, speed_factor=0.5, failure=FailureModel(p_transient=0.2), max_job_events=20),
    ]
