import os
import time

import pytest
from hypothesis import HealthCheck, settings

from qlens.tensor import RngStream

_QUIET = [HealthCheck.too_slow, HealthCheck.data_too_large]
# the default profile is derandomized so the suite is reproducible; "explore" searches wider
settings.register_profile("qlens", deadline=None, max_examples=60, derandomize=True, suppress_health_check=_QUIET)
settings.register_profile("explore", deadline=None, max_examples=1000, suppress_health_check=_QUIET)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "qlens"))


@pytest.fixture
def rng():
    return RngStream(12345)


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory):
    """Copy-task model trained once with the default recipe, shared by the slow tests."""
    from qlens.toymodel import ModelConfig, OptimizerConfig, TaskSpec, evaluate, init, save_checkpoint, train

    task = TaskSpec("copy")
    start = time.perf_counter()
    params, curve = train(init(ModelConfig()), task, 2000, OptimizerConfig(), RngStream(7))
    seconds = time.perf_counter() - start
    directory = tmp_path_factory.mktemp("ckpt") / "copy"
    res = evaluate(params, task)
    save_checkpoint(params, directory, {"steps": 2000, "eval": res.as_dict()})
    return {"path": directory, "params": params, "curve": curve, "eval": res, "seconds": seconds}


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
