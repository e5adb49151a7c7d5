import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from mfvv.exceptions import ConfigError, NonFiniteEvaluation, RejectedSpec, UnknownScenario
from mfvv.problem import (CONVEXITY, GRADIENTS, LIPSCHITZ, RADIUS, SCENARIOS, SUPPORT, ControlSet,
                          InitialMeasure, admissibility_gap, builtin_scenario, checked,
                          closed_form_constants, constants, flat_phi, flat_psi, flat_psi_grad,
                          lambda_threshold, lq_spec, second_moment_bound, spec_from_custom,
                          validate_spec)

# int_0^1 ds int_0^s exp(-1/t) dt, by adaptive quadrature at 1e-13
PSI_AT_TWO = 0.03880353957816157


class TestConstants:
    def test_reference_gap(self):
        gap = admissibility_gap(lq_spec(L=0.1, lambda_=1.0))
        assert gap == pytest.approx(1 - 0.1 * 1.2 * np.exp(1.6), rel=1e-14)
        assert gap == pytest.approx(0.40564, abs=5e-6)

    def test_small_horizon_gap_positive(self):
        spec = lq_spec(horizon=1e-9, L=1.0, M=1.0, lambda_=1e-6)
        assert admissibility_gap(spec) > 0

    def test_large_lipschitz_gap_negative(self):
        assert lambda_threshold(1.0, 1.0) == pytest.approx(3 * np.exp(7), rel=1e-14)
        assert 0.1 - lambda_threshold(1.0, 1.0) < 0

    def test_closed_form_values(self):
        c = closed_form_constants(1.0, 0.1, 1.0, 1.0, 0.0)
        assert c["C2"] == pytest.approx(np.exp(1.4), rel=1e-14)
        assert c["C3"] == pytest.approx(1.2 * np.exp(0.2), rel=1e-14)
        assert c["Lambda"] == pytest.approx(0.59436, abs=5e-6)
        assert c["C1"] == pytest.approx(4 * np.exp(2), rel=1e-14)

    def test_zero_lipschitz(self):
        c = closed_form_constants(1.0, 0.0, 1.0, 1.0, 0.5)
        assert c["C3"] == 1.0 and c["Lambda"] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 2.0), st.floats(0.01, 2.0))
    def test_lambda_identity(self, T, L):
        c = closed_form_constants(T, L, 1.0, 1.0, 0.0)
        assert lambda_threshold(T, L) == pytest.approx(c["C2"] * c["C3"] * L * T, rel=1e-12)

    def test_constants_use_declared_moment(self):
        spec = lq_spec()
        assert constants(spec)["C1"] == pytest.approx(
            closed_form_constants(1.0, 0.1, 0.1, 1.0, 4 / 3)["C1"], rel=1e-14)

    def test_second_moment_bound(self):
        spec = lq_spec(M=0.1)
        assert second_moment_bound(spec, 0.0) == pytest.approx(2 * 2.1 * np.exp(2.5), rel=1e-14)


class TestValidation:
    @pytest.mark.parametrize("name", ["lq_1d", "lq_meanfield_1d", "nonlinear_meanfield_1d"])
    def test_builtins_pass(self, name):
        report = validate_spec(builtin_scenario(name), n_probe=300)
        assert report.passed, report.to_dict()

    def test_counterexample_fails_only_convexity(self):
        report = validate_spec(builtin_scenario("counterexample_flat_psi"), n_probe=300)
        assert report.failed() == [CONVEXITY]

    def test_overstated_lambda_fails(self):
        report = validate_spec(lq_spec(lambda_=1.0).replace(lambda_=2.0), n_probe=300)
        assert report.failed() == [CONVEXITY]
        assert report.checks[CONVEXITY].worst == pytest.approx(0.5, rel=1e-3)

    def test_understated_lipschitz_fails(self):
        report = validate_spec(lq_spec(A=0.5, L=0.1), n_probe=300)
        assert LIPSCHITZ in report.failed()

    def test_wrong_gradient_fails(self):
        spec = lq_spec()
        bad = spec.replace(running_cost_grad_x=lambda t, x, mu: 2 * spec.running_cost_grad_x(t, x, mu))
        assert GRADIENTS in validate_spec(bad, n_probe=200).failed()

    def test_raise_on_failure(self):
        with pytest.raises(RejectedSpec) as err:
            validate_spec(builtin_scenario("counterexample_flat_psi"), n_probe=100, raise_on_failure=True)
        assert err.value.assumption == CONVEXITY
        assert "λ-convexity violated" in str(err.value)

    def test_support_violation(self):
        lying = InitialMeasure(lambda n, rng: rng.uniform(0, 3, (n, 1)), [0.0], [2.0])
        with pytest.raises(RejectedSpec) as err:
            lying.sample(1000, np.random.default_rng(0))
        assert err.value.assumption == SUPPORT
        assert SUPPORT in validate_spec(lq_spec(initial_measure=lying), n_probe=100).failed()

    def test_report_serializes(self):
        d = validate_spec(builtin_scenario("lq_1d"), n_probe=100).to_dict()
        assert all({"passed", "worst", "detail"} <= set(v) for v in d.values())

    def test_nonfinite_callback(self):
        with pytest.raises(NonFiniteEvaluation):
            checked(np.array([1.0, np.nan]), "drift")


class TestScenarios:
    def test_flat_psi_vanishes_on_unit_interval(self):
        spec = builtin_scenario("counterexample_flat_psi")
        np.testing.assert_array_equal(spec.control_cost(np.array([[0.5], [-1.0], [1.0], [0.0]])), 0.0)

    def test_flat_psi_at_two_against_quadrature(self):
        val, _ = integrate.dblquad(lambda t, s: np.exp(-1 / t) if t > 0 else 0.0, 0, 1, 0,
                                   lambda s: s, epsabs=1e-13, epsrel=1e-13)
        assert val == pytest.approx(PSI_AT_TWO, rel=1e-12)
        assert flat_psi(2.0) == pytest.approx(PSI_AT_TWO, rel=1e-12)
        assert flat_psi(-2.0) == pytest.approx(PSI_AT_TWO, rel=1e-12)

    def test_flat_phi_against_quadrature(self):
        for a in (0.1, 0.7, 3.0):
            ref, _ = integrate.quad(lambda t: np.exp(-1 / t), 0, a, epsabs=1e-14)
            assert flat_phi(a) == pytest.approx(ref, rel=1e-10, abs=1e-300)

    def test_flat_psi_gradient(self):
        x = np.array([-3.0, -1.5, 1.2, 2.5])
        h = 1e-6
        fd = (flat_psi(x + h) - flat_psi(x - h)) / (2 * h)
        np.testing.assert_allclose(flat_psi_grad(x), fd, rtol=1e-6)

    def test_lq_gap_positive(self):
        assert admissibility_gap(builtin_scenario("lq_1d")) > 0

    def test_unknown(self):
        with pytest.raises(UnknownScenario):
            builtin_scenario("nope")

    def test_all_names_build(self):
        for name in SCENARIOS:
            assert builtin_scenario(name).name == name

    def test_initial_measures(self):
        rng = np.random.default_rng(0)
        beta = InitialMeasure.scaled_beta(2.0, 2.0, 0.0, 2.0)
        pts = beta.sample(200_000, rng)
        assert np.mean(pts**2) == pytest.approx(beta.second_moment, rel=1e-2)
        assert InitialMeasure.dirac([1.0, 2.0]).is_dirac
        assert InitialMeasure.uniform(-1, 1, 2).radius() == pytest.approx(np.sqrt(2))


class TestControlSet:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.sampled_from(["box", "ball"]))
    def test_projection_idempotent(self, y, kind):
        U = ControlSet.box(1.0, 2) if kind == "box" else ControlSet.ball(1.5, 2)
        p = U.project(np.array(y))
        assert U.contains(p, tol=1e-12)
        np.testing.assert_allclose(U.project(p), p, atol=1e-14)

    def test_radius_below_one_rejected(self):
        with pytest.raises(RejectedSpec):
            lq_spec().replace(control_radius=0.5)

    def test_radius_must_cover_controls(self):
        spec = lq_spec(control_set=ControlSet.box(2.0, 1)).replace(control_radius=1.0)
        assert RADIUS in validate_spec(spec, n_probe=100).failed()

    def test_max_norm(self):
        assert ControlSet.box(1.0, 2).max_norm() == pytest.approx(np.sqrt(2))
        assert ControlSet.ball(2.0, 3).max_norm() == 2.0

    def test_samples_inside(self):
        U = ControlSet.ball(1.0, 3)
        assert np.all(U.contains(U.sample(500, np.random.default_rng(0))))


class TestCustomBlock:
    BLOCK = {"dim": 1, "horizon": 1.0, "lambda": 1.0, "L": 0.2, "M": 0.2,
             "control_set": {"kind": "ball", "radius": 1.0},
             "lq": {"A": 0.2, "B": 0.1, "Q": 0.1, "QT": 0.2, "mean_coupling": 0.05}}

    def test_builds(self):
        spec = spec_from_custom(self.BLOCK)
        assert spec.control_set.kind == "ball" and spec.lip_const == 0.2
        assert validate_spec(spec, n_probe=100).passed

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            spec_from_custom({**self.BLOCK, "colour": 1})
        with pytest.raises(ConfigError):
            spec_from_custom({**self.BLOCK, "lq": {"A": 0.1, "Z": 1}})

    def test_missing_key(self):
        block = dict(self.BLOCK)
        del block["lambda"]
        with pytest.raises(ConfigError):
            spec_from_custom(block)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            spec_from_custom({**self.BLOCK, "lambda": -1.0})
