import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfvv.exceptions import DimensionMismatch, GridMismatch, SizeLimit, WitnessNotLipschitz
from mfvv.measures import (ParticleEnsemble, dirac, kantorovich_w1_lower_bound, moment,
                           optimal_plan, read_snapshot, sinkhorn_cost, sup_wasserstein_path,
                           wasserstein, wasserstein_path, write_snapshot)


def ens(*xs):
    return ParticleEnsemble(np.array(xs, float))


class TestEnsemble:
    def test_one_dimensional_input_becomes_column(self):
        mu = ens(0.0, 1.0, 2.0)
        assert mu.points.shape == (3, 1) and mu.dim == 1 and mu.uniform

    def test_points_are_read_only(self):
        mu = ens(0.0, 1.0)
        with pytest.raises(ValueError):
            mu.points[0, 0] = 3.0

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            ParticleEnsemble([0.0, 1.0], [0.5, 0.6])
        with pytest.raises(ValueError):
            ParticleEnsemble([0.0, 1.0], [1.5, -0.5])

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ens(0.0, np.nan)

    def test_reflect_and_mean(self):
        mu = ParticleEnsemble([[1.0, 2.0], [3.0, 0.0]], [0.25, 0.75])
        np.testing.assert_allclose(mu.mean(), [2.5, 0.5])
        np.testing.assert_allclose(mu.reflect().points, -mu.points)


class TestMoment:
    def test_dirac_zero(self):
        assert moment(dirac([0.0]), 2) == 0.0

    def test_symmetric_pair(self):
        assert moment(ens(-1.0, 1.0), 2) == pytest.approx(1.0, abs=1e-15)

    def test_three_points(self):
        assert moment(ens(0.0, 1.0, 2.0), 2) == pytest.approx(5 / 3, rel=1e-15)

    def test_order_below_one(self):
        with pytest.raises(ValueError):
            moment(ens(0.0), 0.5)


class TestWasserstein:
    @pytest.mark.parametrize("method", ["exact1d", "lp"])
    @pytest.mark.parametrize("p", [1, 2])
    def test_identical(self, method, p):
        mu = ens(0.3, -1.0, 2.0)
        assert wasserstein(mu, mu, p, method=method) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("method", ["exact1d", "lp"])
    @pytest.mark.parametrize("p", [1, 2])
    def test_unit_shift(self, method, p):
        assert wasserstein(dirac([0.0]), dirac([1.0]), p, method=method) == pytest.approx(1.0)

    @pytest.mark.parametrize("method", ["exact1d", "lp"])
    def test_monotone_coupling(self, method):
        assert wasserstein(ens(0.0, 2.0), ens(1.0, 3.0), 2, method=method) == pytest.approx(1.0)

    def test_unequal_weights_against_lp(self):
        rng = np.random.default_rng(4)
        mu = ParticleEnsemble(rng.normal(size=7), rng.dirichlet(np.ones(7)))
        nu = ParticleEnsemble(rng.normal(size=5), rng.dirichlet(np.ones(5)))
        for p in (1, 2):
            assert wasserstein(mu, nu, p, "exact1d") == pytest.approx(wasserstein(mu, nu, p, "lp"), abs=1e-9)

    def test_plan_marginals(self):
        rng = np.random.default_rng(1)
        mu = ParticleEnsemble(rng.normal(size=(6, 2)), rng.dirichlet(np.ones(6)))
        nu = ParticleEnsemble(rng.normal(size=(4, 2)))
        plan = optimal_plan(mu, nu, 2)
        assert plan.check(mu, nu)
        assert plan.cost(mu, nu, 2) ** 0.5 == pytest.approx(wasserstein(mu, nu, 2, "lp"), rel=1e-9)

    def test_equal_size_assignment(self):
        rng = np.random.default_rng(2)
        mu, nu = ParticleEnsemble(rng.normal(size=(9, 3))), ParticleEnsemble(rng.normal(size=(9, 3)))
        plan = optimal_plan(mu, nu, 2)
        assert plan.check(mu, nu) and len(plan.masses) == 9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            wasserstein(dirac([0.0]), dirac([0.0, 1.0]))

    def test_exact1d_needs_one_dimension(self):
        with pytest.raises(ValueError):
            wasserstein(dirac([0.0, 0.0]), dirac([1.0, 0.0]), method="exact1d")

    def test_lp_size_limit(self):
        big = ParticleEnsemble(np.zeros((1001, 2)))
        big2 = ParticleEnsemble(np.ones((1000, 2)))
        with pytest.raises(SizeLimit):
            wasserstein(big, big2, method="lp")

    def test_sinkhorn_approaches_lp(self):
        rng = np.random.default_rng(3)
        mu, nu = ParticleEnsemble(rng.normal(size=(12, 2))), ParticleEnsemble(rng.normal(1.0, 1.0, (10, 2)))
        exact = wasserstein(mu, nu, 2, "lp") ** 2
        errs = []
        for reg in (1e-1, 3e-2, 1e-2):
            cost, info = sinkhorn_cost(mu, nu, 2, reg=reg)
            assert info["marginal_violation"] <= 1e-6
            assert cost >= exact - info["cost_error_bound"] - 1e-9
            errs.append(cost - exact)
        assert errs[0] > errs[1] > errs[2] >= -1e-9

    def test_sinkhorn_reports_info(self):
        mu = ParticleEnsemble(np.random.default_rng(0).normal(size=(30, 2)))
        val, info = wasserstein(mu, mu.reflect(), 2, method="sinkhorn", return_info=True)
        assert val > 0 and {"reg", "marginal_violation", "cost_error_bound", "iterations"} <= set(info)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            wasserstein(dirac([0.0]), dirac([1.0]), method="magic")


small_clouds = arrays(np.float64, st.integers(1, 12),
                      elements=st.floats(-5, 5, allow_nan=False, allow_infinity=False))


@settings(max_examples=60, deadline=None)
@given(small_clouds, small_clouds)
def test_w1_below_w2_and_symmetric(a, b):
    mu, nu = ParticleEnsemble(a), ParticleEnsemble(b)
    w1, w2 = wasserstein(mu, nu, 1), wasserstein(mu, nu, 2)
    assert w1 <= w2 + 1e-12
    assert wasserstein(nu, mu, 2) == pytest.approx(w2, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(small_clouds, small_clouds, small_clouds)
def test_triangle_inequality(a, b, c):
    mu, nu, rho = ParticleEnsemble(a), ParticleEnsemble(b), ParticleEnsemble(c)
    assert wasserstein(mu, rho, 2) <= wasserstein(mu, nu, 2) + wasserstein(nu, rho, 2) + 1e-9


class TestDualBound:
    def test_coordinate_witness(self):
        v = kantorovich_w1_lower_bound(dirac([1.0, 0.0]), dirac([0.0, 0.0]), [lambda x: x[:, 0]])
        assert v == pytest.approx(1.0)

    def test_zero_witness(self):
        v = kantorovich_w1_lower_bound(ens(0.0), ens(1.0), [lambda x: np.zeros(len(x))])
        assert v == 0.0

    def test_identity_witness_attains(self):
        v = kantorovich_w1_lower_bound(ens(1.0, 3.0), ens(0.0, 2.0), [lambda x: x[:, 0]])
        assert v == pytest.approx(1.0) == pytest.approx(wasserstein(ens(1.0, 3.0), ens(0.0, 2.0), 1))

    def test_rejects_steep_witness(self):
        with pytest.raises(WitnessNotLipschitz):
            kantorovich_w1_lower_bound(ens(0.0, 1.0), ens(2.0), [lambda x: 3 * x[:, 0]])


class TestPaths:
    def test_identical_paths(self):
        path = [ens(0.0, 1.0), ens(1.0, 2.0)]
        assert sup_wasserstein_path(path, path) == 0.0

    def test_final_time_difference(self):
        a = [dirac([0.0]), dirac([0.0])]
        b = [dirac([0.0]), dirac([1.0])]
        np.testing.assert_allclose(wasserstein_path(a, b), [0.0, 1.0])
        assert sup_wasserstein_path(a, b) == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(GridMismatch):
            wasserstein_path([dirac([0.0])], [dirac([0.0])] * 2)


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    mu = ParticleEnsemble(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
    write_snapshot(tmp_path / "s.txt", mu, 0.375)
    header = (tmp_path / "s.txt").read_text().splitlines()[0]
    assert header == "2 5 0.375"
    back, t = read_snapshot(tmp_path / "s.txt")
    assert t == 0.375
    np.testing.assert_array_equal(back.points, mu.points)
    np.testing.assert_allclose(back.weights, mu.weights, rtol=1e-15)
