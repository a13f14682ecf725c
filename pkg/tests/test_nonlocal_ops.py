import math

import numpy as np
import pytest

from services.errors import (
    InvalidFamilyError,
    InvalidParameterError,
    KernelSingularityError,
    ResolutionError,
)
from services.field_catalog import SMOOTH_FIELDS, field_from_name, fractional_quad_oracle, smooth_oracle
from services.gridfield import GridField, clamp_tail, constant_tail, negated
from services.nonlocal_ops import (
    DTauOperator,
    ExtremalOperator,
    InfSupOperator,
    LinearOperator,
    QuadratureConfig,
    eval_D_tau,
    eval_D_tau_batch,
    eval_extremal_even,
    eval_inf_sup,
    eval_inf_sup_batch,
    eval_linear,
    eval_linear_batch,
    eval_M_L0,
    eval_M_L0_batch,
    evaluate,
    extremal_over_family,
    scaling_check,
)
from services.params_kernels import (
    EllipticityParams,
    KernelSpec,
    frac_laplace,
    mixed,
    random_kernel,
    radii_of,
)


def _gauss(a, h, dim=1):
    return GridField.from_function(
        lambda x: np.exp(-a * np.sum(x * x, axis=1)), dim, 2.0, h, constant_tail(0.0)
    )


class TestOracle:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5, 1.9])
    @pytest.mark.parametrize("x", [0.0, 0.15, -0.15])
    def test_fractional_laplacian_against_reference(self, sigma, x):
        params = EllipticityParams(sigma, 0.5 * sigma, 1.0, 1.0, 0.0)
        u = _gauss(4.0, 1.0 / 256.0)
        batch = eval_linear_batch(frac_laplace(params, 1.0), u, [x])
        ref = fractional_quad_oracle(lambda t: math.exp(-4.0 * t * t), x, sigma)
        assert abs(batch.value[0] - ref) <= 1e-4 * abs(ref)

    @pytest.mark.parametrize("sigma", [0.5, 1.9])
    @pytest.mark.parametrize("name", SMOOTH_FIELDS)
    def test_smooth_fields_against_reference(self, sigma, name):
        params = EllipticityParams(sigma, 0.5 * sigma, 1.0, 1.0, 0.0)
        u = field_from_name(name, 1, 2.0, 1.0 / 256.0)
        f = smooth_oracle(name)
        xs = [-0.3, 0.0, 0.2]
        got = eval_linear_batch(frac_laplace(params, 1.0), u, xs).value
        ref = np.array([fractional_quad_oracle(f, x, sigma) for x in xs])
        assert np.max(np.abs(got - ref)) <= 1e-4 * np.max(np.abs(ref))

    def test_extremal_with_equal_bounds_is_the_linear_operator(self, gauss_2d):
        params = EllipticityParams(1.5, 0.5, 1.0, 1.0, 0.0, dim=2)
        pts = [[0.0, 0.0], [0.3, -0.2], [1.1, 0.4]]
        lin = eval_linear_batch(frac_laplace(params, 1.0), gauss_2d, pts)
        for sign in ("+", "-"):
            ext = evaluate(ExtremalOperator(params, sign), gauss_2d, pts)
            assert ext.value == pytest.approx(lin.value, rel=1e-9, abs=1e-12)


class TestExtremal:
    def test_constant_field_gives_zero(self, params_1d):
        u = GridField(1, 1.0, 0.125, np.ones(17), constant_tail(1.0))
        for op in (ExtremalOperator(params_1d, "+", with_drift=True), DTauOperator(params_1d)):
            batch = evaluate(op, u, [[0.0], [0.5]])
            assert np.allclose(batch.value, 0.0)
            assert np.allclose(batch.tolerance, 0.0)

    def test_plus_dominates_minus(self, gauss_1d, params_1d):
        pts = np.linspace(-1.5, 1.5, 13)
        plus = eval_M_L0_batch(gauss_1d, pts, params_1d, "+")
        minus = eval_M_L0_batch(gauss_1d, pts, params_1d, "-")
        assert np.all(plus.value >= minus.value)

    def test_drift_shifts_by_b_dtau(self, gauss_1d, params_1d):
        pts = [[0.2], [0.7]]
        no_drift = evaluate(ExtremalOperator(params_1d, "+"), gauss_1d, pts)
        drift = eval_M_L0_batch(gauss_1d, pts, params_1d, "+")
        dtau = eval_D_tau_batch(gauss_1d, pts, params_1d)
        assert drift.value == pytest.approx(no_drift.value + params_1d.b * dtau.value)

    def test_dtau_is_nonnegative(self, gauss_2d, params_2d):
        batch = eval_D_tau_batch(gauss_2d, [[0.0, 0.0], [0.5, 0.5], [1.9, -1.9]], params_2d)
        assert np.all(batch.value >= 0.0)

    def test_clamp_tail_reports_truncation(self, params_1d):
        u = GridField.from_function(lambda x: np.tanh(x[:, 0]), 1, 2.0, 1.0 / 32.0, clamp_tail())
        batch = evaluate(ExtremalOperator(params_1d, "+"), u, [0.0])
        assert batch.truncation[0] > 0.0

    def test_rejects_bad_sign(self, params_1d):
        with pytest.raises(InvalidParameterError):
            ExtremalOperator(params_1d, "*")

    def test_dimension_mismatch(self, gauss_1d, params_2d):
        with pytest.raises(InvalidParameterError):
            evaluate(ExtremalOperator(params_2d, "+"), gauss_1d, [0.0, 0.0])


def _sum_field(u, v, tail_value):
    return GridField(u.dim, u.box_radius, u.spacing, u.values + v.values, constant_tail(tail_value))


class TestStructure:
    @pytest.mark.parametrize("with_drift", [False, True])
    def test_negation_swaps_plus_and_minus(self, gauss_1d, params_1d, with_drift):
        pts = [[-0.4], [0.0], [0.9]]
        plus = evaluate(ExtremalOperator(params_1d, "+", with_drift=with_drift), negated(gauss_1d), pts)
        minus = evaluate(ExtremalOperator(params_1d, "-", with_drift=with_drift), gauss_1d, pts)
        assert plus.value == pytest.approx(-minus.value, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("c", [-3.0, 0.5, 2.0])
    def test_dtau_is_absolutely_homogeneous(self, gauss_1d, params_1d, c):
        pts = [[0.0], [0.35]]
        base = eval_D_tau_batch(gauss_1d, pts, params_1d).value
        scaled = eval_D_tau_batch(gauss_1d.with_values(c * gauss_1d.values), pts, params_1d).value
        assert scaled == pytest.approx(abs(c) * base, rel=1e-9)

    def test_plus_is_subadditive_and_minus_superadditive(self, gauss_1d, params_1d):
        v = field_from_name("shifted-gauss(0.25)", 1, 2.0, gauss_1d.spacing)
        w = _sum_field(gauss_1d, v, 0.25)
        pts = np.linspace(-1.2, 1.2, 11)
        for sign, direction in (("+", 1.0), ("-", -1.0)):
            op = ExtremalOperator(params_1d, sign, with_drift=True)
            split = evaluate(op, gauss_1d, pts).value + evaluate(op, v, pts).value
            joint = evaluate(op, w, pts).value
            assert np.all(direction * (joint - split) <= 1e-9)

    def test_inf_sup_is_degenerate_elliptic(self, gauss_1d, params_1d):
        params = params_1d.with_changes(b=0.0)
        rng = np.random.default_rng(3)
        family = [[random_kernel(params, rng) for _ in range(3)] for _ in range(2)]
        x0 = 0.25
        t = gauss_1d.axis - x0
        bump = gauss_1d.with_values(gauss_1d.values + t * t * np.exp(-t * t))
        q = QuadratureConfig().monotone()
        below = eval_inf_sup_batch(family, gauss_1d, [x0], q).value[0]
        above = eval_inf_sup_batch(family, bump, [x0], q).value[0]
        assert above >= below


class TestFamilies:
    def test_random_kernels_are_sandwiched(self, gauss_1d, params_1d):
        rng = np.random.default_rng(0)
        pts = np.linspace(-1.0, 1.0, 9)
        plus = eval_M_L0_batch(gauss_1d, pts, params_1d, "+")
        minus = eval_M_L0_batch(gauss_1d, pts, params_1d, "-")
        for _ in range(5):
            lin = eval_linear_batch(random_kernel(params_1d, rng), gauss_1d, pts)
            slack = lin.tolerance + np.maximum(plus.tolerance, minus.tolerance) + 1e-9
            assert np.all(lin.value <= plus.value + slack)
            assert np.all(lin.value >= minus.value - slack)

    def test_inf_sup_is_min_of_max(self, gauss_1d, params_1d):
        k1, k2, k3 = mixed(params_1d, 1.0, 0.1), frac_laplace(params_1d, 2.0), mixed(params_1d, 1.5, 0.2)
        pts = [[0.0], [0.4], [1.2]]
        vals = [eval_linear_batch(k, gauss_1d, pts).value for k in (k1, k2, k3)]
        expected = np.minimum(np.maximum(vals[0], vals[1]), vals[2])
        got = eval_inf_sup_batch([[k1, k2], [k3]], gauss_1d, pts).value
        assert got == pytest.approx(expected)

    def test_extremes_over_family(self, gauss_1d, params_1d):
        members = [frac_laplace(params_1d, c) for c in (1.0, 1.5, 2.0)]
        ext = extremal_over_family(members, gauss_1d, [[0.0]])
        # u has a strict maximum at 0, so the operator is negative and scales with c
        single = eval_linear_batch(members[0], gauss_1d, [[0.0]]).value[0]
        assert ext.sup[0] == pytest.approx(single)
        assert ext.inf[0] == pytest.approx(2.0 * single)

    @pytest.mark.parametrize("family", [[], [[]]])
    def test_empty_family(self, family):
        with pytest.raises(InvalidFamilyError):
            InfSupOperator(family)

    def test_mixed_dimensions(self, params_1d, params_2d):
        with pytest.raises(InvalidFamilyError):
            InfSupOperator([[frac_laplace(params_1d, 1.0)], [frac_laplace(params_2d, 1.0)]])

    def test_singular_kernel_is_reported(self, gauss_1d, params_1d):
        spec = KernelSpec(
            even_part=lambda y: np.where(radii_of(y) > 1.0, np.inf, 1.0),
            odd_part=lambda y: np.zeros(len(y)),
            params=params_1d,
        )
        with pytest.raises(KernelSingularityError) as err:
            evaluate(LinearOperator(spec), gauss_1d, [0.0])
        assert abs(err.value.y[0]) > 1.0


class TestSinglePoint:
    def test_wrappers_match_the_batch(self, gauss_1d, params_1d):
        pts = [[0.0], [0.3]]
        k = mixed(params_1d, 1.0, 0.1)
        cases = [
            (eval_linear(k, gauss_1d, [0.3]), eval_linear_batch(k, gauss_1d, pts)),
            (eval_extremal_even(gauss_1d, [0.3], params_1d, "-"),
             evaluate(ExtremalOperator(params_1d, "-"), gauss_1d, pts)),
            (eval_D_tau(gauss_1d, [0.3], params_1d), eval_D_tau_batch(gauss_1d, pts, params_1d)),
            (eval_M_L0(gauss_1d, [0.3], params_1d, "+"), eval_M_L0_batch(gauss_1d, pts, params_1d, "+")),
        ]
        for single, batch in cases:
            assert single.value == pytest.approx(batch.value[1], rel=1e-12, abs=1e-12)
            assert single.tolerance == pytest.approx(batch.tolerance[1], rel=1e-12, abs=1e-15)

    def test_inf_sup_single_point(self, gauss_1d, params_1d):
        k1, k2 = frac_laplace(params_1d, 1.0), frac_laplace(params_1d, 2.0)
        value = eval_inf_sup([[k1, k2]], gauss_1d, [0.0])
        assert value == pytest.approx(eval_linear(k1, gauss_1d, [0.0]).value, rel=1e-12)
        assert value < 0.0


class TestScaling:
    @pytest.mark.parametrize("operator", ["M+", "M-", "D_tau"])
    @pytest.mark.parametrize("alpha,beta", [(2.0, 2.0), (0.5, 0.5), (3.0, 0.5)])
    def test_dilation_identity(self, gauss_1d, params_1d, operator, alpha, beta):
        check = scaling_check(gauss_1d, params_1d, alpha, beta, [0.25], operator=operator)
        assert check.ok
        assert check.gap <= 1e-8 * max(1.0, abs(check.rhs))

    def test_exponent(self, gauss_1d, params_1d):
        assert scaling_check(gauss_1d, params_1d, 1.0, 2.0, [0.0]).exponent == params_1d.sigma
        assert scaling_check(gauss_1d, params_1d, 1.0, 2.0, [0.0], operator="D_tau").exponent == params_1d.tau

    def test_unknown_operator(self, gauss_1d, params_1d):
        with pytest.raises(InvalidParameterError):
            scaling_check(gauss_1d, params_1d, 1.0, 2.0, [0.0], operator="M_L0+")


class TestQuadratureConfig:
    def test_inner_ball_below_resolution(self, gauss_1d, params_1d):
        q = QuadratureConfig(r_inner=gauss_1d.spacing / 4.0, taylor_inner=False)
        with pytest.raises(ResolutionError):
            evaluate(ExtremalOperator(params_1d, "+"), gauss_1d, [0.0], q)

    def test_without_taylor_the_inner_ball_is_error(self, gauss_1d, params_1d):
        batch = evaluate(ExtremalOperator(params_1d, "+"), gauss_1d, [0.0], QuadratureConfig(taylor_inner=False))
        assert batch.inner_error[0] > 0.0

    @pytest.mark.parametrize(
        "overrides",
        [{"rings_per_decade": 2}, {"angular_points": 1}, {"radial_order": 0}, {"r_inner": -1.0}],
    )
    def test_bad_overrides(self, overrides):
        with pytest.raises(InvalidParameterError):
            QuadratureConfig.from_overrides(overrides)

    def test_outer_radius_inside_the_box(self, gauss_1d, params_1d):
        with pytest.raises(InvalidParameterError):
            evaluate(ExtremalOperator(params_1d, "+"), gauss_1d, [0.0], QuadratureConfig(r_outer=1.0))

    def test_refined_doubles_rings(self):
        assert QuadratureConfig().refined().rings_per_decade == 2 * QuadratureConfig().rings_per_decade

    def test_gauss_radial_rule_agrees(self, gauss_1d, params_1d):
        op = ExtremalOperator(params_1d, "+")
        mid = evaluate(op, gauss_1d, [0.1], QuadratureConfig(radial_order=1))
        gauss = evaluate(op, gauss_1d, [0.1])
        assert abs(mid.value[0] - gauss.value[0]) <= 1e-2 * abs(gauss.value[0])

    def test_refinement_stays_within_the_quadrature_error(self, gauss_1d, params_1d):
        op = ExtremalOperator(params_1d, "+", with_drift=True)
        pts = [[0.0], [0.3], [0.8]]
        base = evaluate(op, gauss_1d, pts)
        fine = evaluate(op, gauss_1d, pts, QuadratureConfig().refined())
        assert np.all(np.abs(fine.value - base.value) <= base.quadrature_error + 1e-10)

    def test_midpoint_rule_converges_under_refinement(self, gauss_1d, params_1d):
        op = ExtremalOperator(params_1d, "-")
        q1 = QuadratureConfig(radial_order=1)
        q2, q3 = q1.refined(), q1.refined().refined()
        v1, v2, v3 = (evaluate(op, gauss_1d, [0.2], q).value[0] for q in (q1, q2, q3))
        assert abs(v3 - v2) < abs(v2 - v1)

    def test_monotone_sampling_is_multilinear(self):
        q = QuadratureConfig(interpolation="cubic").monotone()
        assert q.interpolation == "linear"
        assert q.rings_per_decade == QuadratureConfig().rings_per_decade

    def test_unknown_interpolation(self):
        with pytest.raises(InvalidParameterError):
            QuadratureConfig(interpolation="spline")
