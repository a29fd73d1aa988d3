import sys

import numpy as np
import pytest

from handfit.corr_space import encode
from handfit.hand_model import PoseParams, load_model, log_rotation

# hand seen from the back, fingers pointing up in the image
DORSAL_R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def space(model):
    return encode(model)


def dorsal_params(model, **dofs):
    """Hand facing the camera at 0.4 m; ``dofs`` maps "finger_joint_slot" to angle."""
    p = PoseParams(R=log_rotation(DORSAL_R), t=[0.0, 0.08, 0.40])
    for key, val in dofs.items():
        f, j, slot = key.split("_")
        p.theta[model.theta_index(int(f), int(j), slot)] = val
    return p


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
