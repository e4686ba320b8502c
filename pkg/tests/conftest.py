import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vascutrace.phantom import EchoParams, PhantomConfig, build_phantom, simple_bundle

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def straight_config(artifact_rate=0.0, radius=3.0, depth=25.0, half_angle_deg=15.0, trunk_len=40.0, branch_len=60.0):
    a = np.radians(half_angle_deg)
    end_a = (trunk_len + branch_len * np.cos(a), branch_len * np.sin(a), -depth)
    end_b = (trunk_len + branch_len * np.cos(a), -branch_len * np.sin(a), -depth)
    return PhantomConfig(
        trunk=((0.0, 0.0, -depth), (trunk_len, 0.0, -depth)),
        branch_a=(end_a,),
        branch_b=(end_b,),
        radius={"trunk": radius, "branch_a": radius, "branch_b": radius},
        echo=EchoParams(artifact_rate=artifact_rate),
    )


@pytest.fixture(scope="session")
def straight_phantom():
    return build_phantom(straight_config())


@pytest.fixture(scope="session")
def bundle():
    return simple_bundle()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
