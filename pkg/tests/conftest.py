import numpy as np
import pytest

from totalstab.dynamics import PlantModel, SystemMap
from totalstab.regulation import GeneralizedIntegrator

# smooth fixture expressions over x1..x3, shared by expression and acceptance tests
SMOOTH_FIXTURES = [
    "0.5*x1 + sin(x2)",
    "x1^2*x2 - 3*x3",
    "exp(-x1^2)*cos(x2)",
    "tanh(x1*x2) + x3^3",
    "sqrt(1 + x1^2 + x2^2)",
    "x1/(2 + cos(x2))",
    "(x1 - x2)^4 / 12",
    "sin(x1)*sin(x2)*sin(x3)",
    "exp(0.3*x1 - 0.2*x3) - 1",
    "-x1^2 + 2^x2",
]


def central_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.column_stack(cols)


@pytest.fixture
def half_map():
    return SystemMap.from_expressions(["0.5*x1"])


@pytest.fixture
def linear_plant():
    return PlantModel.from_expressions(1, 1, 1, ["0.5*x1"], ["u1"], ["x1"])


@pytest.fixture
def disturbed_plant():
    return PlantModel.from_expressions(1, 1, 1, ["0.5*x1 + 0.05"], ["u1"], ["x1"])


@pytest.fixture
def integrator():
    return GeneralizedIntegrator.standard(1, 1)
