import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from desk import DESK  # noqa: E402


_VERDICTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        if report.failed and not detail:
            detail = str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash")
                         else report.longrepr).splitlines()[0]
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _VERDICTS[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        tr.write_line(f"criterion {number}: {verdict}  {title}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Source model for the desk setting, trained once: (config, metrics, seconds)."""
    from dira import harness as H
    cfg = H.ExperimentConfig(output_dir=str(tmp_path_factory.mktemp("desk")), **DESK)
    t0 = time.perf_counter()
    metrics = H.cmd_train_source(cfg)
    return cfg, metrics, time.perf_counter() - t0
