import numpy as np
import pytest

from conftest import scalar_spec, zero_control, zero_spec
from mfvv.exceptions import BlowUp, CflViolation, GridMismatch
from mfvv.forward import (GridDensity, TimeGrid, brownian_increments, dump_paths, pde_domain,
                          pde_oracle_1d, particle_vs_pde_gap, second_moment_bound_check,
                          simulate_forward, stability_bound, support_envelope,
                          write_density_table)
from mfvv.measures import read_snapshot, wasserstein
from mfvv.problem import InitialMeasure, builtin_scenario


def const_control(c):
    return lambda t, x: np.full_like(x, c)


class TestGrid:
    def test_times(self):
        g = TimeGrid(2.0, 4)
        np.testing.assert_allclose(g.times, [0, 0.5, 1, 1.5, 2])
        assert g.dt == 0.5

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)
        with pytest.raises(ValueError):
            TimeGrid(-1.0, 4)


class TestSimulate:
    def test_zero_dynamics_constant(self):
        p = simulate_forward(zero_spec(), TimeGrid(1.0, 16), 100, 0.0, zero_control, seed=1)
        assert np.all(p.states == p.states[0])

    def test_one_euler_step(self):
        spec = scalar_spec(drift=lambda t, x, mu: -x)
        p = simulate_forward(spec, TimeGrid(1.0, 10), 1, 0.0, zero_control, 0, initial=[[1.0]])
        assert p.states[1, 0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_brownian_variance(self):
        N = 20000
        spec = zero_spec(initial=InitialMeasure.dirac([0.0]))
        p = simulate_forward(spec, TimeGrid(1.0, 32), N, 0.5, zero_control, seed=3)
        assert np.var(p.states[-1]) == pytest.approx(1.0, abs=3 * np.sqrt(2 / N))

    def test_shared_increments_across_viscosity(self):
        spec = zero_spec()
        g = TimeGrid(1.0, 8)
        a = simulate_forward(spec, g, 50, 0.5, zero_control, seed=9)
        b = simulate_forward(spec, g, 50, 0.125, zero_control, seed=9)
        np.testing.assert_array_equal(a.noise, b.noise)
        np.testing.assert_allclose(a.states - a.states[0], 2 * (b.states - b.states[0]), atol=1e-14)

    def test_seed_reproducible(self):
        g = TimeGrid(1.0, 8)
        a = simulate_forward(builtin_scenario("lq_meanfield_1d"), g, 64, 0.3, zero_control, 5)
        b = simulate_forward(builtin_scenario("lq_meanfield_1d"), g, 64, 0.3, zero_control, 5)
        np.testing.assert_array_equal(a.states, b.states)

    def test_frozen_control_array(self):
        g = TimeGrid(1.0, 4)
        u = np.full((4, 3, 1), 0.5)
        p = simulate_forward(zero_spec(), g, 3, 0.0, u, 0)
        np.testing.assert_allclose(p.states[-1] - p.states[0], 0.5)

    def test_bad_inputs(self):
        spec = zero_spec()
        with pytest.raises(ValueError):
            simulate_forward(spec, TimeGrid(1.0, 4), 3, 1.5, zero_control, 0)
        with pytest.raises(GridMismatch):
            simulate_forward(spec, TimeGrid(2.0, 4), 3, 0.1, zero_control, 0)
        with pytest.raises(GridMismatch):
            simulate_forward(spec, TimeGrid(1.0, 4), 3, 0.1, np.zeros((5, 3, 1)), 0)
        with pytest.raises(ValueError):
            simulate_forward(spec, TimeGrid(1.0, 4), 3, 0.1, const_control(2.0), 0)

    def test_blowup(self):
        spec = scalar_spec(drift=lambda t, x, mu: 1e3 * x)
        with pytest.raises(BlowUp):
            simulate_forward(spec, TimeGrid(1.0, 4), 4, 0.0, zero_control, 0, initial=np.ones((4, 1)))

    def test_increment_variance(self):
        dw = brownian_increments(0, 50, 2000, 1, 0.01)
        assert np.var(dw) == pytest.approx(0.01, rel=0.05)


class TestBounds:
    def test_dirac_zero_moment(self):
        spec = zero_spec(initial=InitialMeasure.dirac([0.0]))
        obs, bound = second_moment_bound_check(
            simulate_forward(spec, TimeGrid(1.0, 8), 10, 0.0, zero_control, 0), spec)
        assert obs == 0.0 and bound > 0

    def test_lq_viscous(self):
        spec = builtin_scenario("lq_meanfield_1d")
        obs, bound = second_moment_bound_check(
            simulate_forward(spec, TimeGrid(1.0, 64), 4096, 0.25, const_control(1.0), 0), spec)
        assert obs <= bound

    def test_constant_push(self):
        spec = zero_spec(initial=InitialMeasure.uniform(-1.0, 1.0))
        p = simulate_forward(spec, TimeGrid(1.0, 32), 20000, 0.0, const_control(1.0), 0)
        obs, bound = second_moment_bound_check(p, spec)
        # X_t = xi + t, so M_2(mu_T) = 1/3 + 1
        assert obs == pytest.approx(4 / 3, rel=1e-2) and obs <= bound

    def test_support_envelope_inviscid(self):
        spec = builtin_scenario("nonlinear_meanfield_1d")
        g = TimeGrid(1.0, 64)
        p = simulate_forward(spec, g, 2000, 0.0, const_control(1.0), 0)
        r0 = spec.initial_measure.radius()
        radii = np.max(np.abs(p.states[:, :, 0]), axis=1)
        assert np.all(radii <= support_envelope(spec, g.times, r0) + 1e-12)

    def test_stability_under_control_shift(self):
        spec = builtin_scenario("lq_meanfield_1d")
        g = TimeGrid(1.0, 64)
        a = simulate_forward(spec, g, 2000, 0.25, const_control(0.2), 4)
        b = simulate_forward(spec, g, 2000, 0.25, const_control(0.5), 4)
        gap = np.mean(np.max(np.sum((a.states - b.states) ** 2, axis=2), axis=0))
        assert gap <= stability_bound(spec, 0.3**2)


class TestPde:
    def test_zero_dynamics_unchanged(self):
        spec = zero_spec()
        d0 = GridDensity.from_pdf(spec.initial_measure.pdf, -2.0, 2.0, 200)
        rho = pde_oracle_1d(spec, TimeGrid(1.0, 20), d0, 0.0, zero_control)
        assert np.max(np.abs(rho.values - rho.values[0])) <= 1e-12

    def test_translation(self):
        spec = zero_spec(initial=InitialMeasure.uniform(-0.5, 0.5))
        d0 = GridDensity.from_pdf(spec.initial_measure.pdf, -2.0, 2.0, 800)
        rho = pde_oracle_1d(spec, TimeGrid(1.0, 200), d0, 0.0, const_control(1.0), substeps="auto")
        shifted = wasserstein(rho.ensemble(-1), rho.ensemble(0), 1, method="exact1d")
        assert shifted == pytest.approx(1.0, abs=2 * rho.dx)
        mean_end = rho.ensemble(-1).mean()[0]
        assert mean_end == pytest.approx(1.0, abs=2 * rho.dx)

    def test_heat_variance(self):
        spec = zero_spec(initial=InitialMeasure.uniform(-0.05, 0.05))
        d0 = GridDensity.from_pdf(lambda x: np.exp(-x**2 / (2 * 0.01)), -8.0, 8.0, 1600)
        rho = pde_oracle_1d(spec, TimeGrid(1.0, 100), d0, 0.5, zero_control, substeps="auto")
        var = lambda k: np.sum(rho.values[k] * rho.centers**2) * rho.dx
        assert var(-1) - var(0) == pytest.approx(1.0, rel=0.02)
        assert rho.mass() == pytest.approx(1.0, abs=1e-10)

    def test_cfl_violation(self):
        spec = zero_spec()
        d0 = GridDensity.from_pdf(spec.initial_measure.pdf, -2.0, 2.0, 400)
        with pytest.raises(CflViolation):
            pde_oracle_1d(spec, TimeGrid(1.0, 4), d0, 0.5, zero_control, substeps=1)

    def test_domain_contains_envelope(self):
        spec = builtin_scenario("nonlinear_meanfield_1d")
        lo, hi = pde_domain(spec, 0.25)
        assert hi > support_envelope(spec, 1.0, 2.0) and lo == -hi


class TestGap:
    def test_dirac_stays(self):
        spec = zero_spec(initial=InitialMeasure.dirac([0.0]))
        g = TimeGrid(1.0, 10)
        p = simulate_forward(spec, g, 500, 0.0, zero_control, 0)
        rho = pde_oracle_1d(spec, g, GridDensity.from_dirac(0.0, -1.0, 1.0, 101), 0.0, zero_control)
        assert np.all(particle_vs_pde_gap(p, rho) <= rho.dx)

    def test_constant_advection(self):
        spec = zero_spec(initial=InitialMeasure.uniform(-0.5, 0.5))
        g = TimeGrid(1.0, 100)
        p = simulate_forward(spec, g, 4000, 0.0, const_control(0.5), 0)
        d0 = GridDensity.from_pdf(spec.initial_measure.pdf, -1.5, 1.5, 600)
        rho = pde_oracle_1d(spec, g, d0, 0.0, const_control(0.5), substeps="auto")
        gaps = particle_vs_pde_gap(p, rho, p=1)
        assert np.max(gaps[1:]) <= 3 * rho.dx

    def test_time_grid_mismatch(self):
        spec = zero_spec()
        p = simulate_forward(spec, TimeGrid(1.0, 10), 50, 0.0, zero_control, 0)
        rho = pde_oracle_1d(spec, TimeGrid(1.0, 5), GridDensity.from_pdf(spec.initial_measure.pdf, -2, 2, 40),
                            0.0, zero_control)
        with pytest.raises(GridMismatch):
            particle_vs_pde_gap(p, rho)

    def test_quantile_ensemble_of_uniform(self):
        d = GridDensity(0.0, 1.0, np.ones((1, 10)))
        np.testing.assert_allclose(d.quantile_ensemble(0, 4).points[:, 0], [0.125, 0.375, 0.625, 0.875])


def test_dump_files(tmp_path):
    spec = zero_spec()
    g = TimeGrid(1.0, 10)
    p = simulate_forward(spec, g, 20, 0.1, zero_control, 0)
    files = dump_paths(p, tmp_path / "d", 4)
    assert [f.name for f in files] == ["snapshot_00000.txt", "snapshot_00004.txt",
                                       "snapshot_00008.txt", "snapshot_00010.txt"]
    mu, t = read_snapshot(files[1])
    assert t == pytest.approx(0.4) and np.array_equal(mu.points, p.states[4])
    rho = pde_oracle_1d(spec, g, GridDensity.from_pdf(spec.initial_measure.pdf, -2, 2, 40), 0.0, zero_control)
    write_density_table(tmp_path / "rho.txt", rho)
    table = np.loadtxt(tmp_path / "rho.txt")
    assert table.shape == (12, 41)
