import numpy as np
import pytest

from task_oed.control import CostFunction, QuadraticCost
from task_oed.dynamics import AffineStructure, FeatureMap, SystemModel
from task_oed.scenarios import build_scenario


@pytest.fixture(scope="session")
def drone():
    return build_scenario("drone")


@pytest.fixture(scope="session")
def bump():
    return build_scenario("bump1d")


@pytest.fixture(scope="session")
def car():
    return build_scenario("car")


def identity_map(d_x: int, d_u: int) -> FeatureMap:
    """phi(x, u) = x, ignoring the input."""
    return FeatureMap("identity", d_x, d_u, d_x, lambda X, U: X.copy())


def scalar_linear_map() -> FeatureMap:
    """phi(x, u) = [x, u] for a 1-D system."""
    return FeatureMap("scalar_linear", 1, 1, 2,
                      lambda X, U: np.concatenate([X, U], axis=1))


def scalar_system(a: float, b: float, noise_std: float, horizon: int,
                  x1: float = 0.0) -> SystemModel:
    """x' = a x + b u + w."""
    return SystemModel(np.array([[a, b]]), scalar_linear_map(), noise_std,
                       horizon, op_norm_bound=2.0, x1=np.array([x1]))


def quad_cost_1d(q: float = 1.0, r: float = 1.0) -> CostFunction:
    return CostFunction.from_quadratic(
        "test_quad", QuadraticCost(np.array([[q]]), np.array([[r]])))
