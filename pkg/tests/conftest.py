import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from waveapost import Coefficient, Domain, uniform_mesh
from waveapost.stepper import ProblemSpec, TimeGrid, run


@pytest.fixture
def interval_mesh():
    return uniform_mesh(Domain.interval(1.0), 4)


@pytest.fixture
def square_mesh():
    return uniform_mesh(Domain.rectangle(1.0, 1.0), 2)


def sine_problem():
    return ProblemSpec(
        domain=Domain.interval(1.0),
        a=Coefficient.constant(1.0),
        u1=lambda pts: np.pi * np.sin(np.pi * pts[:, 0]),
        T=1.0,
        exact_u=lambda pts, t: np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * t),
    )


def zero_problem(dim=1):
    domain = Domain.interval(1.0) if dim == 1 else Domain.rectangle(1.0, 1.0)
    return ProblemSpec(domain=domain, a=Coefficient.constant(1.0), T=1.0)


@pytest.fixture(scope="session")
def sine_traj():
    prob = sine_problem()
    return run(prob, TimeGrid.uniform(1.0, 8), n0=8)


@pytest.fixture(scope="session")
def zero_traj():
    prob = zero_problem()
    return run(prob, TimeGrid.uniform(1.0, 4), n0=4)
