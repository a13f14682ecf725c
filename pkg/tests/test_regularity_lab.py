import numpy as np
import pytest

from services.errors import InvalidParameterError, PreconditionError
from services.field_catalog import abs_power, capped_inverse, constant, dip
from services.gridfield import GridField, constant_tail
from services.params_kernels import EllipticityParams
from services.regularity_lab import (
    c1alpha_pipeline,
    default_centers,
    extremal_bounds_check,
    holder_certificate,
    kappa,
    measure_decay_ladder,
    oscillation_decay,
    point_estimate,
    radial_special_function,
    special_function_check,
)

FINE = 1.0 / 1024.0


@pytest.fixture(scope="module")
def sqrt_field():
    return abs_power(1, 2.0, FINE, 0.5)


class TestKappa:
    def test_value(self):
        assert kappa(EllipticityParams(1.0, 0.5), 1.0, 0.1) == pytest.approx(0.025)

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidParameterError):
            kappa(EllipticityParams(1.0, 0.5), 1.0, 0.0)
        with pytest.raises(InvalidParameterError):
            kappa(EllipticityParams(0.5, 0.5), 1.0, 0.1)


class TestOscillation:
    def test_square_root_cusp(self, sqrt_field):
        trace = oscillation_decay(sqrt_field, [0.0], 0.25, 4)
        assert trace.radii == pytest.approx([0.25 * 4.0**-k for k in range(5)])
        assert trace.osc_values == pytest.approx([r**0.5 for r in trace.radii])
        assert trace.fitted_alpha == pytest.approx(0.5, abs=1e-9)
        assert trace.fit_r2 == pytest.approx(1.0)
        assert trace.empirical_constant(1.0) == pytest.approx(1.0)

    def test_radii_below_spacing_are_dropped(self):
        u = abs_power(1, 2.0, 1.0 / 64.0, 0.5)
        trace = oscillation_decay(u, [0.0], 0.25, 6)
        assert min(trace.radii) >= u.spacing

    def test_osc_is_monotone(self, sqrt_field):
        trace = oscillation_decay(sqrt_field, [0.3], 0.5, 5)
        assert all(a >= b for a, b in zip(trace.osc_values, trace.osc_values[1:]))

    def test_constant_is_flagged(self):
        trace = oscillation_decay(constant(1, 2.0, 1.0 / 64.0, 3.0), [0.0], 0.5, 3)
        assert trace.flag == "constant"
        assert trace.fitted_alpha is None

    def test_unresolved_is_flagged(self):
        trace = oscillation_decay(constant(1, 2.0, 0.5, 3.0), [0.0], 0.25, 3)
        assert trace.flag == "under-resolved"

    def test_2d_ball_sample(self):
        u = abs_power(2, 1.0, 1.0 / 64.0, 1.0)
        trace = oscillation_decay(u, [0.0, 0.0], 0.5, 2)
        # max of |x| over the sampled disk is attained on the axes
        assert trace.osc_values[0] == pytest.approx(0.5)


class TestHolder:
    def test_default_centers(self):
        assert len(default_centers(1)) == 9
        assert len(default_centers(2)) == 49

    def test_certificate_of_square_root(self, sqrt_field, params_1d):
        report = holder_certificate(sqrt_field, params_1d, C0=0.0)
        assert len(report.traces) == 9
        assert report.alpha_min == pytest.approx(0.5, abs=1e-6)
        assert report.alpha_median >= report.alpha_min
        assert report.C_emp > 0.0
        assert report.passed

    def test_extremal_bounds(self, gauss_1d, params_1d):
        loose = extremal_bounds_check(gauss_1d, params_1d, 1e6)
        assert loose.passed and not loose.violations
        tight = extremal_bounds_check(gauss_1d, params_1d, 0.0)
        assert not tight.passed
        assert [0.0] in tight.violations
        assert tight.min_M_plus < 0.0


class TestC1Alpha:
    def test_three_halves_power(self, params_1d):
        u = abs_power(1, 2.0, FINE, 1.5)
        report = c1alpha_pipeline(u, params_1d, 0.5)
        assert [s.gamma for s in report.stages] == [0.0, 0.5]
        assert report.final.gamma == 1.0
        assert report.final.ball_radius == pytest.approx(0.5)
        assert not report.stopped_early
        assert report.norms_nondecreasing
        assert report.alpha_fit == pytest.approx(0.5, abs=0.05)

    def test_coarse_grid_stops_early(self, params_1d):
        report = c1alpha_pipeline(abs_power(1, 2.0, 0.125, 1.5), params_1d, 0.5)
        assert report.stopped_early
        assert report.stages == [] and report.final is None

    @pytest.mark.parametrize("abar", [0.0, 1.5])
    def test_abar_range(self, params_1d, abar):
        with pytest.raises(InvalidParameterError):
            c1alpha_pipeline(abs_power(1, 2.0, 0.125, 1.5), params_1d, abar)


class TestPointEstimate:
    def test_capped_inverse_has_unit_exponent(self, params_1d):
        u = capped_inverse(1, 2.0, FINE, 10.0)
        # sigma - tau = 1, so eps0 = 1 + ||u|| gives kappa = 1
        fit = point_estimate(u, params_1d, 0.0, 11.0, verify=False)
        assert fit.kappa == pytest.approx(1.0)
        assert fit.saturated[0] and fit.saturated[-1]
        assert fit.fitted_eps == pytest.approx(1.0, abs=0.02)
        assert fit.tail_constant == pytest.approx(0.2, rel=0.05)

    def test_constant_is_degenerate(self, params_1d):
        fit = point_estimate(constant(1, 2.0, 1.0 / 64.0, 1.0), params_1d, 0.0, 1.0, verify=False)
        assert fit.degenerate
        assert all(fit.saturated)

    def test_negative_field_is_rejected(self, params_1d):
        with pytest.raises(PreconditionError):
            point_estimate(dip(1, 2.0, 1.0 / 64.0), params_1d, 0.0, 1.0, verify=False)

    def test_verification_of_the_supersolution(self, params_1d):
        u = GridField.from_function(
            lambda x: 2.0 - np.exp(-4.0 * x[:, 0] ** 2), 1, 2.0, 1.0 / 64.0, constant_tail(2.0)
        )
        # 2 - gauss has a strict minimum at 0, where M^- is positive
        with pytest.raises(PreconditionError):
            point_estimate(u, params_1d, 0.0, 1.0)

    def test_decay_ladder(self, params_1d):
        ladder = measure_decay_ladder(constant(1, 2.0, 1.0 / 64.0, 0.5), params_1d, 1.0, 2.0, k_max=3)
        assert ladder.levels == [2.0, 4.0, 8.0]
        assert ladder.measures == [0.0, 0.0, 0.0]
        assert ladder.mu_empirical == 1.0
        with pytest.raises(InvalidParameterError):
            measure_decay_ladder(constant(1, 2.0, 1.0 / 64.0, 0.5), params_1d, 1.0, 1.0)


class TestSpecialFunction:
    def test_construction(self):
        phi = radial_special_function(1)
        assert phi.box_radius == 2.0
        assert phi.evaluate([1.5])[0] == pytest.approx(-2.5)
        assert phi.evaluate([2.0, 3.0]).tolist() == [0.0, 0.0]
        with pytest.raises(InvalidParameterError):
            radial_special_function(1, s=0.5)

    def test_check_reports_consistently(self, params_1d):
        report = special_function_check(radial_special_function(1), params_1d)
        assert np.isfinite(report.psi_bound)
        assert report.passed == (report.max_outside <= report.tolerance)

    @pytest.mark.parametrize("sigma,expected", [(0.5, False), (1.9, True)])
    def test_sign_across_sigma(self, sigma, expected):
        # far-field mass of the well wins for small sigma, local concavity near sigma = 2
        params = EllipticityParams(sigma, 0.25, 1.0, 2.0, 0.0)
        report = special_function_check(radial_special_function(1), params)
        assert report.passed is expected
        assert (report.max_outside < 0.0) is expected
        assert report.psi_bound > 0.0

    def test_shallow_function_is_rejected(self, params_1d):
        shallow = dip(1, 2.0, 1.0 / 32.0, 1.0, 0.5, 0.0)
        with pytest.raises(PreconditionError):
            special_function_check(shallow, params_1d)

    def test_support_is_checked(self, params_1d):
        phi = radial_special_function(1)
        with pytest.raises(PreconditionError):
            special_function_check(phi.with_tail(constant_tail(-1.0)), params_1d)
