"""Particle simulation of the controlled McKean-Vlasov SDE and a 1-D grid oracle.

The particle scheme is Euler-Maruyama with the empirical measure frozen over
each step. The grid oracle solves the nonlocal advection-diffusion equation
with a conservative upwind flux and explicit central diffusion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as _rng
from .exceptions import BlowUp, CflViolation, GridMismatch, MassLoss
from .measures import ParticleEnsemble, wasserstein, write_snapshot
from .problem import checked, initial_second_moment, second_moment_bound

BLOWUP = 1e8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k dt on [0, horizon]."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def for_spec(cls, spec, n_steps):
        return cls(spec.horizon, int(n_steps))


@dataclass
class ForwardPaths:
    """Particle trajectories with the Brownian increments that drove them.

    Attributes
    ----------
    states : ndarray, shape (n_steps + 1, N, d)
    noise : ndarray, shape (n_steps, N, d)
        Standard Brownian increments (variance dt), before scaling.
    controls : ndarray, shape (n_steps, N, d)
        Control values applied at each step.
    """

    states: np.ndarray
    noise: np.ndarray
    controls: np.ndarray
    seed: Optional[int]
    epsilon: float
    grid: TimeGrid

    @property
    def times(self):
        return self.grid.times

    @property
    def n_particles(self):
        return self.states.shape[1]

    def ensemble(self, k):
        return ParticleEnsemble(self.states[k])

    def ensembles(self):
        return [self.ensemble(k) for k in range(self.states.shape[0])]


def brownian_increments(seed, n_steps, n_particles, dim, dt):
    """Standard increments of variance dt from the ``forward-noise`` stream."""
    g = _rng.stream(seed, "forward-noise")
    return g.standard_normal((n_steps, n_particles, dim)) * np.sqrt(dt)


def initial_states(spec, n_particles, seed):
    return spec.initial_measure.sample(n_particles, _rng.stream(seed, "initial"))


def _control_values(control, k, t, x, U):
    if isinstance(control, np.ndarray):
        u = control[k]
    else:
        u = np.asarray(control(t, x), dtype=float).reshape(x.shape)
    if not np.all(U.contains(u, tol=1e-9)):
        raise ValueError(f"control left U at step {k}")
    return u


def euler_maruyama(spec, grid, x0, noise, epsilon, control, gamma=1.0, i_b=None, i_sigma=None):
    """Core Euler-Maruyama loop with optional continuation inputs.

    The drift is ``gamma (b + u) + i_b`` and the noise coefficient
    ``gamma sqrt(2 eps) + i_sigma``; ``gamma = 1`` with no inputs is the
    plain controlled dynamics.

    Returns
    -------
    states, controls : ndarrays
    """
    n, N, d = grid.n_steps, x0.shape[0], spec.dim
    dt = grid.dt
    times = grid.times
    states = np.empty((n + 1, N, d))
    controls = np.empty((n, N, d))
    states[0] = x0
    sig = gamma * np.sqrt(2.0 * epsilon)
    for k in range(n):
        x = states[k]
        mu = ParticleEnsemble(x)
        u = _control_values(control, k, times[k], x, spec.control_set)
        controls[k] = u
        drift = gamma * (checked(spec.drift(times[k], x, mu), "drift") + u)
        if i_b is not None:
            drift = drift + i_b[k]
        s = sig + (0.0 if i_sigma is None else i_sigma[k])
        nxt = x + dt * drift
        if s != 0.0:
            nxt = nxt + s * noise[k]
        if not np.all(np.abs(nxt) < BLOWUP):
            raise BlowUp(f"particle state exceeded {BLOWUP:g} at step {k + 1}")
        states[k + 1] = nxt
    return states, controls


def simulate_forward(spec, grid, n_particles, epsilon, control, seed, initial=None, noise=None):
    """Simulate N interacting particles under a feedback or frozen control.

    Parameters
    ----------
    spec : ProblemSpec
    grid : TimeGrid
    n_particles : int
    epsilon : float
        Viscosity in [0, 1]; the noise coefficient is sqrt(2 eps).
    control : callable or ndarray
        ``control(t, x)`` returning ``(N, d)`` values in U, or a frozen
        ``(n_steps, N, d)`` array of per-particle controls.
    seed : int
        Drives the ``initial`` and ``forward-noise`` streams. Runs with the
        same seed and different ``epsilon`` share the same increments.
    initial : ndarray, shape (N, d), optional
        Initial particle positions; sampled from ``mu0`` when omitted.
    noise : ndarray, shape (n_steps, N, d), optional
        Brownian increments to reuse instead of drawing new ones.

    Returns
    -------
    ForwardPaths
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if abs(grid.horizon - spec.horizon) > 1e-12:
        raise GridMismatch("time grid horizon differs from the problem horizon")
    N, d = int(n_particles), spec.dim
    x0 = initial_states(spec, N, seed) if initial is None else np.asarray(initial, float).reshape(N, d)
    if noise is None:
        noise = brownian_increments(seed, grid.n_steps, N, d, grid.dt)
    elif noise.shape != (grid.n_steps, N, d):
        raise GridMismatch(f"noise has shape {noise.shape}, expected {(grid.n_steps, N, d)}")
    if isinstance(control, np.ndarray) and control.shape != (grid.n_steps, N, d):
        raise GridMismatch(f"frozen control has shape {control.shape}")
    states, controls = euler_maruyama(spec, grid, x0, noise, epsilon, control)
    return ForwardPaths(states, noise, controls, seed, float(epsilon), grid)


def second_moment_bound_check(paths, spec):
    """Return ``(observed, bound)``: max_k M_2(mu_k) and the a-priori bound."""
    observed = float(np.max(np.mean(np.sum(paths.states**2, axis=2), axis=1)))
    return observed, second_moment_bound(spec, initial_second_moment(spec))


def support_envelope(spec, t, r0):
    """Radius bound for the inviscid support under the linear-growth condition.

    With ``|b| <= M (1 + |x| + M_1(mu))`` and ``|u| <= R`` the support radius
    satisfies ``r' <= M (1 + 2r) + R``, hence
    ``r(t) <= (r0 + c) exp(2 M t) - c`` with ``c = (M + R) / (2 M)``.
    """
    M, R = spec.growth_const, spec.control_radius
    c = (M + R) / (2 * M)
    return (r0 + c) * np.exp(2 * M * np.asarray(t, float)) - c


def stability_bound(spec, delta_sq):
    """C_2 T |delta|^2 bound on E sup |X' - X|^2 for a constant control shift."""
    L, T = spec.lip_const, spec.horizon
    return float(np.exp((4 * L + 1) * T) * T * delta_sq)


# grid oracle ----------------------------------------------------------------

@dataclass
class GridDensity:
    """Piecewise-constant density on a uniform 1-D cell grid.

    Attributes
    ----------
    x_min, x_max : float
    values : ndarray, shape (n_times, n_x)
        Density per cell; ``values.sum(axis=1) * dx`` is the mass.
    times : ndarray, shape (n_times,)
    """

    x_min: float
    x_max: float
    values: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def n_x(self):
        return self.values.shape[1]

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.n_x

    @property
    def centers(self):
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.dx

    def mass(self, k=-1):
        return float(self.values[k].sum() * self.dx)

    @classmethod
    def from_pdf(cls, pdf, x_min, x_max, n_x, sub=8):
        """Cell averages of ``pdf`` (``sub``-point midpoint rule), renormalized."""
        dx = (x_max - x_min) / n_x
        pts = x_min + (np.arange(n_x * sub) + 0.5) * dx / sub
        vals = np.asarray(pdf(pts), float).reshape(n_x, sub).mean(axis=1)
        vals = np.clip(vals, 0.0, None)
        vals /= vals.sum() * dx
        return cls(float(x_min), float(x_max), vals[None, :])

    @classmethod
    def from_dirac(cls, point, x_min, x_max, n_x):
        dx = (x_max - x_min) / n_x
        vals = np.zeros(n_x)
        vals[min(int((point - x_min) / dx), n_x - 1)] = 1.0 / dx
        return cls(float(x_min), float(x_max), vals[None, :])

    def ensemble(self, k=-1):
        """Cell centres weighted by cell mass."""
        w = self.values[k] * self.dx
        return ParticleEnsemble(self.centers, w / w.sum())

    def quantile_ensemble(self, k, n):
        """``n`` equal-mass points at the midpoint quantile levels (i + 1/2)/n."""
        w = self.values[k] * self.dx
        w = w / w.sum()
        cdf = np.concatenate(([0.0], np.cumsum(w)))
        cdf[-1] = 1.0
        levels = (np.arange(n) + 0.5) / n
        # cdf is linear inside each cell
        j = np.clip(np.searchsorted(cdf, levels, side="right") - 1, 0, self.n_x - 1)
        frac = (levels - cdf[j]) / np.where(w[j] > 0, w[j], 1.0)
        return ParticleEnsemble(self.x_min + (j + np.clip(frac, 0.0, 1.0)) * self.dx)


def pde_domain(spec, epsilon, r0=None):
    """Padded interval containing the support envelope plus 6 sqrt(2 eps T)."""
    T = spec.horizon
    if r0 is None:
        r0 = spec.initial_measure.radius()
    r = float(support_envelope(spec, T, r0)) + 6.0 * np.sqrt(2.0 * epsilon * T)
    return -r, r


def _cfl_number(dt, vmax, eps, dx):
    return dt * (vmax / dx + 2.0 * eps / dx**2)


def pde_oracle_1d(spec, grid, density0, epsilon, control, substeps=1):
    """Evolve a grid density under the nonlocal advection-diffusion equation.

    Parameters
    ----------
    spec : ProblemSpec
        One-dimensional problem.
    grid : TimeGrid
    density0 : GridDensity
        Initial slice (only ``values[0]`` is used).
    epsilon : float
    control : callable
        Feedback ``u(t, x)`` on ``(n, 1)`` arrays.
    substeps : int or "auto"
        Sub-steps per time step. With ``"auto"`` the smallest count meeting
        the CFL bound 0.9 is chosen per step.

    Returns
    -------
    GridDensity
        Values at every grid time.

    Raises
    ------
    CflViolation
        If a fixed ``substeps`` does not satisfy the CFL bound.
    MassLoss
        If the total mass drifts by more than 1e-6.
    """
    if spec.dim != 1:
        raise ValueError("the grid oracle is one-dimensional")
    rho = np.array(density0.values[0], dtype=float)
    if np.any(rho < 0):
        raise ValueError("initial density must be nonnegative")
    n_x, dx = density0.n_x, density0.dx
    mass0 = rho.sum() * dx
    if abs(mass0 - 1.0) > 1e-8:
        raise ValueError(f"initial density has mass {mass0!r}")
    faces = (density0.x_min + np.arange(1, n_x) * dx)[:, None]
    centers_w = density0.centers
    out = np.empty((grid.n_steps + 1, n_x))
    out[0] = rho
    dt = grid.dt
    times = grid.times
    flux = np.zeros(n_x + 1)
    for k in range(grid.n_steps):
        t = times[k]
        u = np.asarray(control(t, faces), float).reshape(-1)

        def velocity(r):
            w = np.clip(r, 0.0, None) * dx
            mu = ParticleEnsemble(centers_w, w / w.sum())
            return checked(spec.drift(t, faces, mu), "drift")[:, 0] + u

        v = velocity(rho)
        vmax = float(np.max(np.abs(v))) if v.size else 0.0
        if substeps == "auto":
            m = max(1, int(np.ceil(_cfl_number(dt, vmax, epsilon, dx) / 0.9)))
        else:
            m = int(substeps)
            if _cfl_number(dt / m, vmax, epsilon, dx) > 0.9:
                raise CflViolation(
                    f"CFL number {_cfl_number(dt / m, vmax, epsilon, dx):.3f} exceeds 0.9 at step {k}")
        tau = dt / m
        for j in range(m):
            if j:
                v = velocity(rho)
                if _cfl_number(tau, float(np.max(np.abs(v))), epsilon, dx) > 1.0:
                    raise CflViolation(f"CFL bound lost inside step {k}")
            adv = np.where(v > 0, v * rho[:-1], v * rho[1:])
            dif = -epsilon * (rho[1:] - rho[:-1]) / dx
            flux[1:-1] = adv + dif
            rho = rho - tau / dx * (flux[1:] - flux[:-1])
            rho = np.where(rho < 0, 0.0, rho) if np.any(rho < 0) else rho
        out[k + 1] = rho
        if abs(rho.sum() * dx - mass0) > 1e-6:
            raise MassLoss(f"mass drifted to {rho.sum() * dx!r} at step {k + 1}")
    return GridDensity(density0.x_min, density0.x_max, out, times.copy())


def particle_vs_pde_gap(paths, density, p=2):
    """Per-time W_p between the particle cloud and a quantile ensemble of the density."""
    if paths.states.shape[2] != 1:
        raise ValueError("the comparison is one-dimensional")
    if density.values.shape[0] != paths.states.shape[0]:
        raise GridMismatch("particle and grid solutions use different time grids")
    if not np.allclose(density.times, paths.times, rtol=0, atol=1e-12):
        raise GridMismatch("particle and grid solutions use different time grids")
    N = paths.n_particles
    return np.array([
        wasserstein(paths.ensemble(k), density.quantile_ensemble(k, N), p, method="exact1d")
        for k in range(paths.states.shape[0])
    ])


def write_density_table(path, density):
    """Text table: first row ``nan`` then the cell centres, then one row per time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = np.concatenate(([np.nan], density.centers))
    body = np.column_stack([density.times, density.values])
    np.savetxt(path, np.vstack([head, body]), fmt="%.17g")


def dump_paths(paths, out_dir, every):
    """Write one snapshot file per ``every`` grid steps (and the final step)."""
    out_dir = Path(out_dir)
    n = paths.states.shape[0]
    ks = sorted(set(range(0, n, max(int(every), 1))) | {n - 1})
    files = []
    for k in ks:
        f = out_dir / f"snapshot_{k:05d}.txt"
        write_snapshot(f, paths.ensemble(k), paths.times[k])
        files.append(f)
    return files
