import numpy as np
import pytest

from symguide import GmmModel, L2TargetLoss, MlpModel, build_linear_schedule

# The default desk-scale task: well-separated bimodal mixture in d=2 with an
# L2 pull toward one component mean.  All statistical-trend tests were
# calibrated against pilot runs of this exact configuration.
TASK_T = 50
TASK_BETAS = (0.004, 0.35)
TASK_MEANS = [[-3.0, 0.0], [3.0, 0.0]]
TASK_TARGET = [-3.0, 0.0]
TASK_WINDOW = (15, 35)
TASK_RHO = 0.1


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b)) / (denom if denom > 0 else 1.0)


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule(TASK_T, *TASK_BETAS)


@pytest.fixture(scope="session")
def gmm2():
    return GmmModel([0.5, 0.5], TASK_MEANS)


@pytest.fixture(scope="session")
def mlp3():
    return MlpModel.random([3, 16, 16, 3], seed=5)


@pytest.fixture(scope="session")
def task_loss():
    return L2TargetLoss(np.array(TASK_TARGET))
