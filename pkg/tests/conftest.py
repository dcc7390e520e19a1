from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from coolgen import dsl
from coolgen.family import Envelope, Specification, make_env, sla_from_t_high
from coolgen.scene import gen_workload, load_scene

DATA = Path(__file__).parent / "data"
ENVELOPE = Envelope(("mu", "t_high"), (100.0, 22.0), (150.0, 27.0))


def data_path(name: str) -> Path:
    return Path(str(resources.files("coolgen.data").joinpath(name)))


@pytest.fixture(scope="session")
def scene():
    return load_scene(data_path("reference_scene.json"))


@pytest.fixture(scope="session")
def humid_scene():
    return load_scene(data_path("humid_scene.json"))


@pytest.fixture(scope="session")
def workload():
    return gen_workload(96 * 14, 11)


@pytest.fixture(scope="session")
def reference_reward():
    return dsl.load_reward_file(data_path("reference.reward"))


@pytest.fixture(scope="session")
def listing_reward():
    return dsl.load_reward_file(data_path("listing.reward"))


@pytest.fixture(scope="session")
def envelope():
    return ENVELOPE


@pytest.fixture
def env(scene, workload, reference_reward):
    return make_env(scene, Specification(125, sla_from_t_high(25.0)), workload, reference_reward)


@pytest.fixture(scope="session")
def smoke_config_path():
    return DATA / "smoke_config.json"


# --- reference-config artifacts shared by the slow suites ------------------------------------

@pytest.fixture(scope="session")
def ref():
    """Default run config with its scene, workload trace and family reward."""
    from coolgen.config import load_config

    cfg = load_config(None)
    return cfg, cfg.load_scene(), cfg.workload.trace(), cfg.load_reward()


@pytest.fixture(scope="session")
def unified(ref):
    """25-spec pool curated with the unified reward, plus its experts."""
    from coolgen import pipeline

    cfg, scene, workload, reward = ref
    return pipeline.curate(cfg, scene, workload, reward)


# --- acceptance verdict lines ----------------------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = getattr(item.function, "criterion", None)
    if n is None or rep.when != "call":
        return
    recorded = dict(item.user_properties).get("verdict")
    if recorded is None:
        recorded = f"criterion {n:>2}: {'PASS' if rep.passed else 'FAIL'} ({'no verdict recorded' if rep.passed else 'error'})"
    _VERDICTS[n] = recorded


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
