import numpy as np
import pytest

from momap.core import Camera, MoMap
from momap.synth import LinearMotion, RigidBodySpec, SceneSpec, generate

_acceptance = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "acceptance", None)
    if marker is not None:
        _acceptance[marker] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), outcome in sorted(_acceptance.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num:>2}: {title}")


def random_momap(rng, H=4, W=5, T=6, with_colors=False, f32=True):
    """Fully valid random MoMap; values exactly representable in float32 when ``f32``."""
    pos = rng.normal(0.0, 1.0, (H, W, T, 3))
    if f32:
        pos = pos.astype(np.float32).astype(np.float64)
    colors = rng.random((H, W, 3)).astype(np.float32).astype(np.float64) if with_colors else None
    return MoMap(pos, np.ones((H, W, T), dtype=bool), colors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_scene(H=16, W=16, T=6, velocity=(0.1, 0.0, 0.0), time_step=1.0, seed=0):
    cam = Camera.static(20.0, 20.0, (W - 1) / 2, (H - 1) / 2, T)
    bodies = (
        RigidBodySpec(("rect", (2, 2, 8, 8)), 2.0, LinearMotion(velocity)),
        RigidBodySpec(("rect", (10, 9, 14, 15)), 2.5, LinearMotion((0.0, 0.0, 0.0))),
    )
    return SceneSpec(H, W, T, cam, bodies, background_depth=5.0, time_step=time_step, seed=seed)


@pytest.fixture
def small_scene():
    spec = linear_scene()
    return (spec,) + generate(spec)
