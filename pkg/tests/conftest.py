import numpy as np
import pytest
import torch

from submap_slam.geometry import Intrinsics, Pose

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_intr():
    return Intrinsics.from_fov(64, 48, 70.0)


def random_pose(rng, rot_scale=1.0, trans_scale=1.0) -> Pose:
    xi = np.concatenate([rng.normal(size=3) * rot_scale, rng.normal(size=3) * trans_scale])
    return Pose.exp(xi)


# -- acceptance summary: one line per criterion, printed after the run ------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    n = int(report.nodeid.split("test_criterion_")[1][:2])
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        verdict = "PASS" if report.passed else "FAIL"
        ACCEPTANCE[n] = f"criterion {n:2d}: {verdict}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
