import math

import numpy as np
import pytest

from services.errors import InvalidParameterError, KernelSingularityError
from services.params_kernels import (
    EllipticityParams,
    KernelSpec,
    UniversalConstants,
    check_hypotheses,
    check_smallness,
    frac_laplace,
    kernel_from_name,
    mixed,
    odd_power,
    random_kernel,
    sphere_area,
    two_tau,
    verify_kernel_class,
)


class TestHypotheses:
    def test_default_point_passes(self, params_1d):
        report = check_hypotheses(params_1d)
        assert report.ok
        assert report.failures() == []
        assert report.h2.margin == pytest.approx(0.5)

    def test_tau_at_one_fails_h1(self):
        report = check_hypotheses(EllipticityParams(1.5, 1.0, 1.0, 1.0, 0.0))
        assert not report.h1.passed
        assert "H1" in report.failures()

    def test_gap_below_m_fails_h2(self):
        report = check_hypotheses(EllipticityParams(1.2, 0.9, 1.0, 1.0, 0.0))
        assert not report.h2.passed

    def test_large_drift_fails_h3(self):
        # lambda A0 (2 - sigma) = 0.5 < b (1 - tau) = 0.75
        report = check_hypotheses(EllipticityParams(1.5, 0.5, 1.0, 1.0, 1.5))
        assert not report.h3.passed
        assert report.h3.margin == pytest.approx(-0.25)

    def test_h3_boundary_is_inclusive(self):
        assert check_hypotheses(EllipticityParams(1.5, 0.5, 1.0, 1.0, 1.0)).h3.passed

    def test_inverted_ellipticity(self):
        report = check_hypotheses(EllipticityParams(1.5, 0.5, 2.0, 1.0, 0.0))
        assert not report.ellipticity.passed

    def test_non_finite_raises(self):
        with pytest.raises(InvalidParameterError):
            check_hypotheses(EllipticityParams(float("nan"), 0.5))

    def test_universal_constants_are_used(self):
        params = EllipticityParams(1.5, 0.5, universal=UniversalConstants(m=1.25))
        assert not check_hypotheses(params).h2.passed

    @pytest.mark.parametrize("sigma", [1.0, 1.5, 1.9, 1.99])
    def test_smallness_at_half_budget(self, sigma):
        tau = min(sigma - 0.5, 0.9)
        b = 0.5 * (2.0 - sigma) / (1.0 - tau)
        assert check_smallness(EllipticityParams(sigma, tau, 1.0, 1.0, b)).passed
        assert not check_smallness(EllipticityParams(sigma, tau, 1.0, 1.0, 1.01 * b)).passed


class TestKernelSpec:
    def test_frac_laplace_values(self, params_1d):
        spec = frac_laplace(params_1d, 1.0)
        ke, ko = spec.evaluate(np.array([[0.5], [-2.0]]))
        assert ke == pytest.approx([0.5 * 0.5 ** -2.5, 0.5 * 2.0 ** -2.5])
        assert np.all(ko == 0.0)

    def test_moments_match_closed_form(self, params_1d):
        spec = frac_laplace(params_1d, 1.0)
        # int_{-rho}^{rho} y^2 (2 - s) |y|^{-1-s} dy = 2 rho^{2-s}
        m2, err = spec.second_moment(0.25)
        assert m2 == pytest.approx(2.0 * 0.25**0.5)
        assert err == 0.0
        mass, _ = spec.outer_mass(2.0)
        assert mass == pytest.approx(0.5 * 2.0 * 2.0**-1.5 / 1.5)

    def test_singularity_is_reported(self, params_1d):
        spec = frac_laplace(params_1d, 1.0)
        with pytest.raises(KernelSingularityError) as exc:
            spec.evaluate(np.array([[0.0]]))
        assert exc.value.y == [0.0]

    def test_user_kernel_without_moments_uses_class_bounds(self, params_1d):
        spec = KernelSpec(
            even_part=lambda y: 0.5 * 1.5 / np.abs(y[:, 0]) ** 2.5,
            odd_part=lambda y: np.zeros(len(y)),
            params=params_1d,
        )
        m2, err = spec.second_moment(1.0)
        assert m2 == pytest.approx(1.5 * sphere_area(1))
        assert err == pytest.approx(0.5 * sphere_area(1))

    def test_name_parsing(self, params_1d):
        spec = kernel_from_name("mixed(1.5, 0.1)", params_1d)
        assert spec.name == "mixed(1.5,0.1)"
        with pytest.raises(InvalidParameterError):
            kernel_from_name("mixed(1.5)", params_1d)
        with pytest.raises(InvalidParameterError):
            kernel_from_name("gaussian(1)", params_1d)


class TestKernelClass:
    def test_frac_laplace_in_l1(self, params_1d):
        report = verify_kernel_class(frac_laplace(params_1d, 1.0))
        assert report.symmetric and report.l0 and report.l0_tilde and report.l1

    def test_even_amplitude_above_lambda_hi(self, params_1d):
        report = verify_kernel_class(frac_laplace(params_1d, 3.0))
        assert not report.l0
        assert report.even_upper_margin < 0

    def test_mixed_kernel_total_nonnegative(self, params_1d):
        report = verify_kernel_class(mixed(params_1d, 1.5, 0.2))
        assert report.l0_tilde
        assert report.min_total >= 0.0

    def test_odd_part_above_b(self, params_1d):
        report = verify_kernel_class(odd_power(params_1d, 0.5, 0.5))
        assert not report.l0
        assert report.odd_margin < 0

    def test_declared_l1_constant_is_enforced(self, params_1d):
        report = verify_kernel_class(frac_laplace(params_1d, 1.0, l1_constant=1e-6))
        assert report.l0_tilde and not report.l1
        assert report.translate_integral > 1e-6

    def test_two_exponent_bound(self):
        params = EllipticityParams(1.5, 0.5, 1.0, 2.0, 0.2)
        report = verify_kernel_class(two_tau(params, 0.2, 0.3, 0.5))
        assert report.two_exponent_ok is True

    def test_2d_frac_laplace(self, params_2d):
        report = verify_kernel_class(frac_laplace(params_2d, 1.0), sample_radii=np.logspace(-2, 2, 16))
        assert report.l0_tilde
        assert math.isfinite(report.translate_integral)

    def test_random_kernels_are_deterministic_members(self, params_1d):
        a = [random_kernel(params_1d, np.random.default_rng(7)) for _ in range(3)]
        b = [random_kernel(params_1d, np.random.default_rng(7)) for _ in range(3)]
        assert [k.name for k in a] == [k.name for k in b]
        for spec in a:
            assert verify_kernel_class(spec, sample_radii=np.logspace(-2, 2, 16)).l0_tilde
