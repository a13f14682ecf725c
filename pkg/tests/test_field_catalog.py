import math

import numpy as np
import pytest

from services.errors import InvalidParameterError
from services.field_catalog import (
    SMOOTH_FIELDS,
    ball_torsion,
    field_from_name,
    fractional_quad_oracle,
    smooth_oracle,
)
from services.gridfield import GridField, constant_tail
from services.nonlocal_ops import eval_linear_batch
from services.params_kernels import EllipticityParams, frac_laplace


@pytest.mark.parametrize("name", SMOOTH_FIELDS)
def test_smooth_fields_match_their_closed_form(name):
    u = field_from_name(name, 1, 2.0, 1.0 / 32.0)
    f = smooth_oracle(name)
    expected = np.array([f(t) for t in u.axis])
    assert u.flat_values == pytest.approx(expected, abs=1e-14)
    # zero or constant beyond the box
    assert u.evaluate([10.0])[0] == pytest.approx(f(10.0), abs=1e-12)


def test_bare_name_uses_defaults():
    u = field_from_name("gauss", 2, 1.0, 0.25)
    assert u.evaluate([[0.0, 0.0]])[0] == 1.0


@pytest.mark.parametrize("name", ["nope(1)", "gauss(a)", "gauss(1,2,3,4)", "gauss(("])
def test_bad_names(name):
    with pytest.raises(InvalidParameterError):
        field_from_name(name, 1, 2.0, 0.25)


def test_no_closed_form_for_rough_fields():
    with pytest.raises(InvalidParameterError):
        smooth_oracle("sign-strips(8)")


def test_linear_field_extends_exactly():
    u = field_from_name("linear(2,1)", 1, 1.0, 0.25)
    assert u.evaluate([3.0])[0] == 7.0
    assert u.tail.kind == "callable"


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5, 1.9])
def test_reference_quadrature_matches_closed_form(sigma):
    # For exp(-a y^2) at 0 the integral is 2 (2 - s) a^{s/2} Gamma(-s/2)
    ref = 2.0 * (2.0 - sigma) * 4.0 ** (0.5 * sigma) * math.gamma(-0.5 * sigma)
    got = fractional_quad_oracle(lambda t: math.exp(-4.0 * t * t), 0.0, sigma)
    assert got == pytest.approx(ref, rel=1e-4)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("x", [0.0, 0.5])
def test_ball_torsion_has_constant_operator_value(sigma, x):
    f, w = ball_torsion(sigma)
    got = fractional_quad_oracle(lambda t: max(1.0 - t * t, 0.0) ** (0.5 * sigma), x, sigma)
    assert got == pytest.approx(f, rel=1e-4)


def test_ball_torsion_on_the_grid():
    sigma = 1.0
    f, w = ball_torsion(sigma)
    assert f == pytest.approx(-2.0 * math.pi)
    u = GridField.from_function(w, 1, 2.0, 1.0 / 256.0, constant_tail(0.0))
    params = EllipticityParams(sigma, 0.5, 1.0, 1.0, 0.0)
    got = eval_linear_batch(frac_laplace(params, 1.0), u, [0.0, 0.5]).value
    assert got == pytest.approx([f, f], rel=1e-2)
