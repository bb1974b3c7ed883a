import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcnum.utility import (ProfileError, approx_utility, attained_level, build_profile,
                            check_concavity_conditions, fast_log_utility, ideal_utility, interval_index,
                            lift_base_quality, log_utility, log_utility_delta, numerical_concavity,
                            segment_log_derivative, signed_log_add, signed_log_utility_delta,
                            transformed_utility, transformed_utility_derivative)


def toy(alpha=0.1, w=1.0):
    return build_profile([0.5, 2.0, 3.0, 3.6], [10.0, 40.0, 70.0, 100.0], alpha, w)


class TestBuildProfile:
    def test_segment_constants(self):
        p = toy()
        assert p.N == 3
        np.testing.assert_allclose(p.seg.logA, 0.1 * np.array([10.0, 40.0, 70.0]))
        np.testing.assert_allclose(p.seg.logB - p.seg.logA, np.log([0.5 / 2.0, 2.0 / 3.0, 3.0 / 3.6]))
        np.testing.assert_allclose(p.seg.logG, [1.5, 1.5, 1.5])
        np.testing.assert_allclose(p.seg.lo, [10.0, 25.0, 55.0])
        np.testing.assert_allclose(p.seg.hi, [25.0, 55.0, 100.0])

    def test_log_amb_matches_direct(self):
        p = toy()
        A = np.exp(p.seg.logA)
        B = np.exp(p.seg.logB)
        np.testing.assert_allclose(np.exp(p.seg.logAmB), A - B, rtol=1e-12)

    @pytest.mark.parametrize("u, beta, msg", [
        ([1, 2, 3], [1, 2], "length mismatch"),
        ([1, 2, 3], [1, 3, 2], "rate indices not increasing"),
        ([0, 2, 3], [1, 2, 3], "u_0 must be positive"),
        ([1, 3, 2], [1, 2, 3], "quality indices not increasing"),
    ])
    def test_rejects(self, u, beta, msg):
        with pytest.raises(ProfileError, match=msg):
            build_profile(u, beta, 1.0, 1.0)

    def test_rejects_bad_box_and_parameters(self):
        with pytest.raises(ProfileError, match="box"):
            build_profile([1, 2], [10, 20], 1.0, 1.0, m=15)
        with pytest.raises(ProfileError, match="alpha"):
            build_profile([1, 2], [10, 20], 0.0, 1.0)
        with pytest.raises(ProfileError, match="weight"):
            build_profile([1, 2], [10, 20], 1.0, -1.0)

    def test_lift_base_quality(self):
        u, new = lift_base_quality([0, 2, 3.9, 5.7])
        assert new == pytest.approx(0.05) and u[1:] == [2, 3.9, 5.7]
        assert lift_base_quality([0, 2, 3]) == ([0.5, 2, 3], 0.5)
        assert lift_base_quality([1, 2]) == ([1, 2], None)
        with pytest.raises(ProfileError):
            lift_base_quality([0, 1, 3])


class TestConditions:
    def test_all_pass(self):
        rep = check_concavity_conditions(build_profile([0.5, 2, 3, 3.6], [10, 40, 70, 100], 1.0, 1.0))
        assert rep.ok and rep.c2_strict and rep.min_logG == 15

    def test_c2_failure(self):
        rep = check_concavity_conditions(build_profile([0.5, 1, 3, 5], [100, 200, 300, 400], 1.0, 1.0))
        assert rep.c1 and not rep.c2 and "C2 FAIL" in str(rep)

    def test_equal_steps_pass_but_not_strict(self):
        rep = check_concavity_conditions(build_profile([0.5, 1.3, 2.1, 2.5], [1, 2, 3, 4], 10.0, 1.0))
        assert rep.c2 and not rep.c2_strict

    def test_c3_threshold(self):
        rep = check_concavity_conditions(toy(alpha=0.1))
        assert not rep.c3 and rep.min_logG == pytest.approx(1.5)


class TestUtilities:
    def test_ideal_staircase(self):
        p = toy()
        assert ideal_utility(p, 10.0) == 0.5
        assert ideal_utility(p, 10.5) == 2.0
        assert ideal_utility(p, 40.0) == 2.0
        assert ideal_utility(p, 100.0) == 3.6
        assert attained_level(p, 71.0) == 3

    def test_interval_ties_go_low(self):
        p = toy()
        assert interval_index(p, 25.0) == 0
        assert interval_index(p, 25.0 + 1e-9) == 1

    def test_box_enforced(self):
        with pytest.raises(ValueError):
            approx_utility(toy(), 5.0)

    def test_approx_matches_direct_formula(self):
        p = toy()
        x = np.linspace(10, 100, 57)
        i = interval_index(p, x)
        direct = (p.u[i + 1] - p.u[i]) / (1 + np.exp(-p.alpha * (x - p.beta[i]))) + p.u[i]
        np.testing.assert_allclose(approx_utility(p, x), direct, rtol=1e-14)

    def test_log_forms_agree(self):
        p = toy()
        x = np.linspace(10, 100, 31)
        ref = np.log(approx_utility(p, x))
        np.testing.assert_allclose(log_utility(p, x), ref, rtol=1e-12)
        np.testing.assert_allclose(transformed_utility(p, p.alpha * x), ref, rtol=1e-12)
        np.testing.assert_allclose([fast_log_utility(p, v) for v in x], ref, rtol=1e-12)

    def test_large_alpha_no_overflow(self):
        p = build_profile([0.5, 2, 3], [192, 384, 768], 5.0, 1.0)
        vals = log_utility(p, np.linspace(192, 768, 101))
        assert np.all(np.isfinite(vals)) and np.all(np.diff(vals) >= 0)

    def test_delta_keeps_tiny_gains(self):
        p = build_profile([0.5, 2, 3], [192, 384, 768], 2.0, 1.0)
        d = log_utility_delta(p, 300.01, 300.0)
        assert d > 0
        assert fast_log_utility(p, 300.01) - fast_log_utility(p, 300.0) == 0.0

    def test_signed_delta_below_float_range(self):
        p = build_profile([0.5, 2, 3], [192, 384, 768], 5.0, 1.0)
        sg, lm = signed_log_utility_delta(p, 600.1, 600.0)
        assert sg == 1.0 and lm < -700
        sg2, lm2 = signed_log_utility_delta(p, 600.0, 600.1)
        assert sg2 == -1.0 and lm2 == pytest.approx(lm)

    def test_signed_log_add(self):
        assert signed_log_add((1.0, math.log(3.0)), (-1.0, math.log(1.0)))[1] == pytest.approx(math.log(2.0))
        assert signed_log_add((1.0, 0.0), (-1.0, 0.0))[0] == 0.0
        assert signed_log_add((0.0, -math.inf), (-1.0, 2.0)) == (-1.0, 2.0)


class TestDerivative:
    def test_matches_direct_formula(self):
        p = toy(alpha=0.1)
        for i in range(p.N):
            A = math.exp(p.seg.logA[i])
            B = math.exp(p.seg.logB[i])
            for z in (0.5 * A, A, 2 * A):
                direct = (A - B) / ((z + A) * (z + B))
                assert math.exp(segment_log_derivative(p, i, math.log(z))) == pytest.approx(direct, rel=1e-12)

    def test_lower_side_at_edge(self):
        p = toy()
        eb = p.alpha * p.seg.hi[0]
        assert transformed_utility_derivative(p, eb) == segment_log_derivative(p, 0, eb)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_derivative_positive_and_decreasing(self, frac):
        p = toy(alpha=1.0)
        ell = p.alpha * (p.m + frac * (p.M - p.m))
        d1 = transformed_utility_derivative(p, ell)
        d2 = transformed_utility_derivative(p, min(ell + 0.01, p.alpha * p.M))
        assert np.isfinite(d1)
        # log d/dz decreasing in z means concave in z
        assert d2 <= d1 + 1e-12


class TestConcavityCertificate:
    def test_good_profile_passes(self):
        cert = numerical_concavity(build_profile([0.5, 2, 3, 3.6], [10, 40, 70, 100], 1.0, 1.0), n=3000)
        assert cert.passed()
        assert cert.max_junction_ratio < 0

    def test_c2_violation_fails_for_any_sharpness(self):
        for alpha in (0.1, 1.0, 5.0):
            cert = numerical_concavity(build_profile([0.5, 1, 3, 5], [100, 200, 300, 400], alpha, 1.0), n=2000)
            assert not cert.passed()
            assert cert.max_junction_ratio > 0

    def test_edge_jump_shrinks_with_sharpness(self):
        soft = numerical_concavity(build_profile([0.5, 2, 3], [100, 140, 180], 0.2, 1.0), n=500)
        sharp = numerical_concavity(build_profile([0.5, 2, 3], [100, 140, 180], 2.0, 1.0), n=500)
        assert sharp.max_edge_jump < soft.max_edge_jump
