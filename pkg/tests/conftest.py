import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from denseswin.config import run_config_from_dict  # noqa: E402
from denseswin.train import train  # noqa: E402

_CRITERIA: dict[int, dict] = {}


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Desk preset, 50 synthetic images all used for training, default recipe for 200 epochs."""
    out = tmp_path_factory.mktemp("overfit")
    cfg = run_config_from_dict(
        {"data": {"synthetic_per_class": 10, "test_fraction": 0.0}, "train": {"epochs": 200, "out_dir": str(out)}}
    )
    start = time.perf_counter()
    result = train(cfg, out)
    return cfg, out, result, time.perf_counter() - start


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "detail": []})
    if report.when == "call" or report.failed:
        entry["passed"] &= report.passed
        entry["detail"] += [str(v) for k, v in item.user_properties if k == "detail"]
        if report.failed:
            entry["detail"].append(f"failed in {item.name}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = "; ".join(e["detail"])
        line = f"{'PASS' if e['passed'] else 'FAIL'}  {number:2d}. {e['title']}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
