import numpy as np
import pytest

from services.gridfield import GridField, constant_tail
from services.params_kernels import EllipticityParams


@pytest.fixture
def params_1d():
    """sigma = 1.5, tau = 0.5 with a small drift; passes H1-H3."""
    return EllipticityParams(sigma=1.5, tau=0.5, lambda_lo=1.0, lambda_hi=2.0, b=0.2, dim=1)


@pytest.fixture
def params_2d():
    return EllipticityParams(sigma=1.5, tau=0.5, lambda_lo=1.0, lambda_hi=2.0, b=0.2, dim=2)


@pytest.fixture
def gauss_1d():
    return GridField.from_function(
        lambda x: np.exp(-4.0 * x[:, 0] ** 2), 1, 2.0, 1.0 / 64.0, constant_tail(0.0)
    )


@pytest.fixture
def gauss_2d():
    return GridField.from_function(
        lambda x: np.exp(-4.0 * np.sum(x * x, axis=1)), 2, 2.0, 1.0 / 16.0, constant_tail(0.0)
    )
