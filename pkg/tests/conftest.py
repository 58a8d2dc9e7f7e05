import copy

import pytest

TINY_CONFIG = {
    "seed": 0,
    "grid": {"preset": None, "n_lat": 8, "n_lon": 16, "levels": [850, 500], "poles": False},
    "data": {"steps": 30},
    "model": {"embed_dim": 16, "n_blocks": 2, "window": 4, "patch": 2, "heads": 2, "variant": "full"},
    "train": {"iterations": 3, "batch": 2, "checkpoint_every": 0},
    "evaluate": {"leads": 2, "max_inits": 2},
    "cnop": {"lead_steps": 1, "k_max": 2, "region": {"lat": [-60.0, 60.0], "lon": [0.0, 360.0]}},
    "ablation": {"seeds": [0, 1], "leads": 2, "max_inits": 2},
}


@pytest.fixture
def tiny_config():
    return copy.deepcopy(TINY_CONFIG)


_criteria: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok = all(_criteria[n])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({len(_criteria[n])} checks)")
