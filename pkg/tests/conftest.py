import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from priorloc.pipeline.config import PipelineConfig  # noqa: E402
from priorloc.pipeline.runner import run  # noqa: E402
from priorloc.pipeline.simulate import SceneSpec, simulate, write_simulation  # noqa: E402

# criterion number -> (title, passed, detail)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = getattr(item, "criterion_detail", "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
        detail = (detail + "; " if detail else "") + msg.splitlines()[0][:160]
    _CRITERIA[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] C{n:<2} {title}: {detail}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the criterion line."""

    def _set(text: str):
        request.node.criterion_detail = text
        print(text)

    return _set


@pytest.fixture(scope="session")
def room_sim():
    return simulate(SceneSpec(kind="room"))


@pytest.fixture(scope="session")
def corridor_sim():
    return simulate(SceneSpec(kind="corridor"))


@pytest.fixture(scope="session")
def room_dir(room_sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("room")
    write_simulation(room_sim, out)
    return out


@pytest.fixture(scope="session")
def room_run(room_sim):
    return run(room_sim.dataset, PipelineConfig())


@pytest.fixture(scope="session")
def corridor_runs(corridor_sim):
    """Full and DM-free runs on the corridor, with their wall-clock times."""
    import time

    out = {}
    for name, cfg in (("full", PipelineConfig()), ("no_dm", PipelineConfig().with_factors(dm=False))):
        t = time.perf_counter()
        res = run(corridor_sim.dataset, cfg)
        out[name] = (res, time.perf_counter() - t)
    return out
