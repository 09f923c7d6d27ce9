import sys
from pathlib import Path

import numpy as np
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_coord = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


@st.composite
def quaternions(draw):
    q = np.array(draw(st.tuples(_coord, _coord, _coord, _coord)))
    n = np.linalg.norm(q)
    if n < 0.1:
        q = np.array([1.0, 0.0, 0.0, 0.0])
        n = 1.0
    return q / n


@st.composite
def tangents(draw, max_norm=1.4):
    v = np.array(draw(st.tuples(_coord, _coord, _coord)))
    return v * max_norm / np.sqrt(3.0)


seeds = st.integers(0, 2**31 - 1)


# one summary line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
