"""Particle solver for the mean-field forward-backward system.

The forward component is the controlled particle system; the backward
component is the adjoint equation, discretized by an explicit backward Euler
step with least-squares regression for the conditional expectations
(Longstaff-Schwartz style). The two are coupled through the Hamiltonian
minimizer ``alpha = a(Y)`` and solved by damped Picard iteration, optionally
inside a continuation ladder in the coupling strength ``gamma``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.preprocessing import PolynomialFeatures

from . import rng as _rng
from .exceptions import NoConvergence
from .forward import ForwardPaths, TimeGrid, brownian_increments, euler_maruyama, initial_states
from .hamiltonian import MinimizerConfig, minimize_hamiltonian
from .measures import ParticleEnsemble
from .problem import admissibility_gap, checked, closed_form_constants, constants

_CHUNK = 256


# regression -----------------------------------------------------------------

@dataclass(frozen=True)
class RegressionConfig:
    """Polynomial least-squares regression on standardized coordinates.

    Parameters
    ----------
    degree : int
        Total polynomial degree of the basis.
    ridge : float
        Penalty (relative to N) used when the design matrix is rank deficient.
    """

    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.ridge <= 0:
            raise ValueError("ridge must be positive")


class PolynomialBasis:
    """Monomials of total degree <= ``degree`` in standardized coordinates."""

    def __init__(self, dim, degree):
        self.powers = PolynomialFeatures(degree).fit(np.zeros((1, dim))).powers_
        self.dim = dim

    @property
    def size(self):
        return self.powers.shape[0]

    def standardize(self, x):
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return center, scale

    def design(self, x, center, scale):
        z = (x - center) / scale
        return np.prod(z[:, None, :] ** self.powers[None, :, :], axis=2)


def _least_squares(B, targets, ridge):
    """Solve min |B c - targets|, falling back to ridge when B is rank deficient."""
    coef, _, rank, _ = np.linalg.lstsq(B, targets, rcond=None)
    if rank == B.shape[1]:
        return coef, False
    G = B.T @ B + ridge * B.shape[0] * np.eye(B.shape[1])
    return np.linalg.solve(G, B.T @ targets), True


# containers -----------------------------------------------------------------

@dataclass
class InputTuple:
    """Continuation inputs (I^b, I^sigma, I^f, I^g).

    Attributes
    ----------
    i_b : ndarray, shape (n_steps, N, d)
    i_sigma : ndarray, shape (n_steps,)
    i_f : ndarray, shape (n_steps + 1, N, d)
        Driver input at each grid time.
    i_g : ndarray, shape (N, d)
    """

    i_b: np.ndarray
    i_sigma: np.ndarray
    i_f: np.ndarray
    i_g: np.ndarray

    @classmethod
    def zeros(cls, n_steps, n_particles, dim):
        return cls(np.zeros((n_steps, n_particles, dim)), np.zeros(n_steps),
                   np.zeros((n_steps + 1, n_particles, dim)), np.zeros((n_particles, dim)))

    def norm(self, dt):
        """Discretized input norm sqrt(E|I^g|^2 + sum dt (|I^b|^2 + |I^s|^2 + |I^f|^2))."""
        total = np.mean(np.sum(self.i_g**2, axis=1))
        total += dt * np.sum(np.mean(np.sum(self.i_b**2, axis=2), axis=1))
        total += dt * np.sum(self.i_sigma**2)
        total += dt * np.sum(np.mean(np.sum(self.i_f[1:] ** 2, axis=2), axis=1))
        return float(np.sqrt(total))

    def __add__(self, other):
        return InputTuple(self.i_b + other.i_b, self.i_sigma + other.i_sigma,
                          self.i_f + other.i_f, self.i_g + other.i_g)


@dataclass(frozen=True)
class SNorm:
    """Discretized process norm of a (difference of) solution(s)."""

    value: float

    def __float__(self):
        return self.value


def s_norm(dx, dy, dz, da, dt):
    """sqrt(E max_k (|X|^2 + |Y|^2) + E sum_k dt (|Z|^2 + |alpha|^2))."""
    sup = np.max(np.sum(dx**2, axis=2) + np.sum(dy**2, axis=2), axis=0)
    integral = dt * (np.sum(dz**2, axis=tuple(range(2, dz.ndim))) + np.sum(da**2, axis=2)).sum(axis=0)
    return SNorm(float(np.sqrt(np.mean(sup) + np.mean(integral))))


@dataclass
class FbsdeState:
    """Discretized solution (X, law of X, Y, Z, alpha).

    Attributes
    ----------
    forward : ForwardPaths
    adjoint_y : ndarray, shape (n_steps + 1, N, d)
    adjoint_z : ndarray, shape (n_steps, N, d, d)
        ``Z[k, i, a, b]`` pairs the adjoint coordinate ``a`` with the Brownian
        coordinate ``b``.
    controls : ndarray, shape (n_steps, N, d)
    history : list of float
        Picard residuals.
    """

    forward: ForwardPaths
    adjoint_y: np.ndarray
    adjoint_z: np.ndarray
    controls: np.ndarray
    epsilon: float
    gamma: float = 1.0
    history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    ridge_fallbacks: int = 0
    rungs: list = field(default_factory=list)

    @property
    def grid(self):
        return self.forward.grid

    def copy(self):
        fw = self.forward
        return FbsdeState(
            ForwardPaths(fw.states.copy(), fw.noise, fw.controls.copy(), fw.seed, fw.epsilon, fw.grid),
            self.adjoint_y.copy(), self.adjoint_z.copy(), self.controls.copy(), self.epsilon,
            self.gamma, list(self.history), self.converged, self.iterations,
            self.ridge_fallbacks, list(self.rungs),
        )

    def distance(self, other):
        return s_norm(self.forward.states - other.forward.states, self.adjoint_y - other.adjoint_y,
                      self.adjoint_z - other.adjoint_z, self.controls - other.controls,
                      self.grid.dt)

    def max_abs_y(self):
        return float(np.max(np.linalg.norm(self.adjoint_y, axis=2)))


# mean-field derivative terms ------------------------------------------------

def _mean_field_sum(kernel, t, X, mu, Y, ignore_xprime, matrix):
    """(1/N) sum_j K(X_j)(X_i)^T Y_j (matrix kernels) or (1/N) sum_j K(X_j)(X_i)."""
    N = X.shape[0]
    if ignore_xprime:
        K = checked(kernel(t, X, mu, X) if t is not None else kernel(X, mu, X), "measure kernel")
        if matrix:
            total = np.einsum("jab,ja->b", K, Y) / N
        else:
            total = K.sum(axis=0) / N
        return np.broadcast_to(total, X.shape)
    out = np.empty_like(X)
    xj = X[None, :, :]
    for s in range(0, N, _CHUNK):
        xi = X[s:s + _CHUNK, None, :]
        K = checked(kernel(t, xj, mu, xi) if t is not None else kernel(xj, mu, xi), "measure kernel")
        if matrix:
            out[s:s + _CHUNK] = np.einsum("ijab,ja->ib", K, Y) / N
        else:
            out[s:s + _CHUNK] = K.sum(axis=1) / N
    return out


def adjoint_driver(spec, t, X, Y):
    """D_i = grad_x b(X_i)^T Y_i + grad_x f(X_i) + (1/N) sum_j [dmu b(X_j)(X_i)^T Y_j + dmu f(X_j)(X_i)]."""
    mu = ParticleEnsemble(X)
    gb = checked(spec.drift_grad_x(t, X, mu), "drift_grad_x")
    D = np.einsum("iab,ia->ib", gb, Y) + checked(spec.running_cost_grad_x(t, X, mu), "running_cost_grad_x")
    fast = spec.kernels_ignore_xprime
    D = D + _mean_field_sum(spec.drift_dmu, t, X, mu, Y, fast, True)
    D = D + _mean_field_sum(spec.running_cost_dmu, t, X, mu, None, fast, False)
    return D


def terminal_condition(spec, ensemble_T):
    """Y_T^i = grad_x g(X_T^i) + (1/N) sum_j dmu g(X_T^j)(X_T^i)."""
    X = ensemble_T.points
    Y = checked(spec.final_cost_grad_x(X, ensemble_T), "final_cost_grad_x")
    if ensemble_T.uniform:
        Y = Y + _mean_field_sum(spec.final_cost_dmu, None, X, ensemble_T, None,
                                spec.kernels_ignore_xprime, False)
    else:
        K = checked(spec.final_cost_dmu(X[None, :, :], ensemble_T, X[:, None, :]), "final_cost_dmu")
        Y = Y + np.einsum("j,ija->ia", ensemble_T.weights, K)
    return np.array(Y, dtype=float)


# one solve context ------------------------------------------------------------

@dataclass
class _Context:
    spec: object
    grid: TimeGrid
    x0: np.ndarray
    noise: np.ndarray
    epsilon: float
    regression: RegressionConfig
    minimizer: MinimizerConfig
    seed: Optional[int]

    def __post_init__(self):
        self.basis = PolynomialBasis(self.spec.dim, self.regression.degree)

    def alpha(self, Y):
        return minimize_hamiltonian(self.spec, None, None, None, Y, self.minimizer)

    def forward(self, controls, gamma=1.0, inputs=None):
        i_b = None if inputs is None else inputs.i_b
        i_s = None if inputs is None else inputs.i_sigma
        states, _ = euler_maruyama(self.spec, self.grid, self.x0, self.noise, self.epsilon,
                                   controls, gamma, i_b, i_s)
        return states

    def noisy(self, gamma, inputs):
        sig = gamma * np.sqrt(2.0 * self.epsilon)
        if inputs is not None:
            return bool(np.any(sig + inputs.i_sigma != 0.0))
        return sig != 0.0

    def backward(self, states, gamma=1.0, inputs=None):
        """Explicit backward induction; returns (Y, Z, ridge fallback count)."""
        spec, grid = self.spec, self.grid
        n, N, d = grid.n_steps, states.shape[1], spec.dim
        dt, times = grid.dt, grid.times
        Y = np.empty((n + 1, N, d))
        Z = np.zeros((n, N, d, d))
        Y[n] = gamma * terminal_condition(spec, ParticleEnsemble(states[n]))
        if inputs is not None:
            Y[n] += inputs.i_g
        regress = self.noisy(gamma, inputs)
        fallbacks = 0
        for k in range(n - 1, -1, -1):
            drv = gamma * adjoint_driver(spec, times[k + 1], states[k + 1], Y[k + 1])
            if inputs is not None:
                drv = drv + inputs.i_f[k + 1]
            target = Y[k + 1] + dt * drv
            if not regress:
                Y[k] = target
                continue
            center, scale = self.basis.standardize(states[k])
            B = self.basis.design(states[k], center, scale)
            zt = (Y[k + 1][:, :, None] * self.noise[k][:, None, :]).reshape(N, d * d)
            coef, fell = _least_squares(B, np.concatenate([target, zt], axis=1), self.regression.ridge)
            fallbacks += fell
            fit = B @ coef
            Y[k] = fit[:, :d]
            Z[k] = fit[:, d:].reshape(N, d, d) / dt
        return checked(Y, "adjoint"), Z, fallbacks

    def state(self, states, controls, Y, Z, gamma, fallbacks=0):
        fw = ForwardPaths(states, self.noise, controls, self.seed, self.epsilon, self.grid)
        return FbsdeState(fw, Y, Z, controls, self.epsilon, gamma, ridge_fallbacks=fallbacks)


def backward_pass(spec, forward, regression=None):
    """Adjoint (Y, Z) for given forward paths.

    Y is propagated backward from the terminal condition by
    ``Y_k = E[Y_{k+1} + dt D_{k+1} | X_k]`` where the conditional expectation
    is a least-squares regression for ``epsilon > 0`` and the identity for
    ``epsilon = 0`` (in which case Z = 0). Z is ``E[Y_{k+1} dW_k^T | X_k] / dt``.
    """
    ctx = _Context(spec, forward.grid, forward.states[0], forward.noise, forward.epsilon,
                   regression or RegressionConfig(), MinimizerConfig(), forward.seed)
    Y, Z, _ = ctx.backward(forward.states)
    return Y, Z


def _zero_state(ctx, gamma, inputs=None):
    n, N, d = ctx.grid.n_steps, ctx.x0.shape[0], ctx.spec.dim
    Y = np.zeros((n + 1, N, d))
    controls = ctx.alpha(Y[:-1])
    states = ctx.forward(controls, gamma, inputs)
    return ctx.state(states, controls, Y, np.zeros((n, N, d, d)), gamma)


def _picard(ctx, state, gamma, inputs, damping):
    a_prop = ctx.alpha(state.adjoint_y[:-1])
    x_prop = ctx.forward(a_prop, gamma, inputs)
    y_prop, z_prop, fb = ctx.backward(x_prop, gamma, inputs)
    Y = damping * y_prop + (1 - damping) * state.adjoint_y
    Z = damping * z_prop + (1 - damping) * state.adjoint_z
    controls = damping * ctx.alpha(y_prop[:-1]) + (1 - damping) * state.controls
    controls = ctx.spec.control_set.project(controls)
    states = ctx.forward(controls, gamma, inputs)
    new = ctx.state(states, controls, Y, Z, gamma, state.ridge_fallbacks + fb)
    new.history = state.history
    new.iterations = state.iterations
    new.rungs = state.rungs
    return new, new.distance(state)


def picard_step(spec, state, damping=0.5, regression=None, minimizer=None):
    """One damped application of the fixed-point map at full coupling.

    Controls are recomputed from the current adjoint, the particles are
    re-simulated with these frozen per-particle controls, the adjoint is
    re-solved, and the new (Y, Z, controls) are blended with the old ones.
    The forward paths are then recomputed from the blended controls.

    Returns
    -------
    (FbsdeState, SNorm)
        The new state and the process norm of its difference to ``state``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    fw = state.forward
    ctx = _Context(spec, fw.grid, fw.states[0], fw.noise, state.epsilon,
                   regression or RegressionConfig(), minimizer or MinimizerConfig(), fw.seed)
    new, res = _picard(ctx, state, 1.0, None, damping)
    new.history = list(state.history) + [res.value]
    new.iterations = state.iterations + 1
    return new, res


def _iterate(ctx, state, gamma, inputs, tol, max_iter, damping):
    history = []
    for _ in range(max_iter):
        state, res = _picard(ctx, state, gamma, inputs, damping)
        history.append(res.value)
        if res.value <= tol:
            return state, history, True
    return state, history, False


def _frozen_inputs(ctx, state, eta, base):
    """eta-scaled coefficients of the system frozen at ``state``, added to ``base``."""
    spec, grid = ctx.spec, ctx.grid
    n, times = grid.n_steps, grid.times
    X, Y = state.forward.states, state.adjoint_y
    i_b = np.empty_like(base.i_b)
    alpha = ctx.alpha(Y[:-1])
    for k in range(n):
        i_b[k] = checked(spec.drift(times[k], X[k], ParticleEnsemble(X[k])), "drift") + alpha[k]
    i_f = np.zeros_like(base.i_f)
    for k in range(1, n + 1):
        i_f[k] = adjoint_driver(spec, times[k], X[k], Y[k])
    i_g = terminal_condition(spec, ParticleEnsemble(X[n]))
    i_s = np.full(n, np.sqrt(2.0 * ctx.epsilon))
    return InputTuple(base.i_b + eta * i_b, base.i_sigma + eta * i_s,
                      base.i_f + eta * i_f, base.i_g + eta * i_g)


def estimate_stability_constant(ctx, gamma=0.25, tol=1e-6, max_iter=200, damping=0.5):
    """Ratio |Theta - Theta'|_S^2 / E|xi - xi'|^2 from two probe solves of the
    gamma-system with shifted initial data."""
    h = 0.1 * max(float(np.mean(ctx.x0.std(axis=0))), 1.0)
    shifted = _Context(ctx.spec, ctx.grid, ctx.x0 + h, ctx.noise, ctx.epsilon,
                       ctx.regression, ctx.minimizer, ctx.seed)
    a, _, _ = _iterate(ctx, _zero_state(ctx, gamma), gamma, None, tol, max_iter, damping)
    b, _, _ = _iterate(shifted, _zero_state(shifted, gamma), gamma, None, tol, max_iter, damping)
    return a.distance(b).value ** 2 / (ctx.spec.dim * h**2)


def _continuation(ctx, tol, max_iter, damping):
    n, N, d = ctx.grid.n_steps, ctx.x0.shape[0], ctx.spec.dim
    c_stab = estimate_stability_constant(ctx, tol=tol, max_iter=max_iter, damping=damping)
    delta0 = min(0.25, 1.0 / (2.0 * c_stab))
    n_rungs = int(np.ceil(1.0 / delta0 - 1e-12))
    eta = 1.0 / n_rungs
    zero = InputTuple.zeros(n, N, d)
    # the gamma = 0 system decouples: Y = I^g = 0, X = xi
    state = _zero_state(ctx, 0.0)
    history, rungs = [], []
    converged = True
    for r in range(n_rungs):
        gamma = r * eta
        outer = 0
        ok = False
        for outer in range(1, max_iter + 1):
            inputs = _frozen_inputs(ctx, state, eta, zero)
            nxt, inner, inner_ok = _iterate(ctx, state, gamma, inputs, tol / 10, max_iter, damping)
            history.extend(inner)
            step = nxt.distance(state).value
            state = nxt
            if step <= tol and inner_ok:
                ok = True
                break
        converged &= ok
        rungs.append({"gamma": (r + 1) * eta, "outer_iterations": outer, "converged": ok})
        if not ok:
            break
    state.gamma = rungs[-1]["gamma"]
    # express the final state as a solution of the gamma = 1 system
    state, tail, tail_ok = _iterate(ctx, state, 1.0, None, tol, max_iter, damping)
    history.extend(tail)
    state.gamma = 1.0
    state.rungs = [{"delta0": delta0, "c_stab": c_stab}] + rungs
    return state, history, converged and tail_ok


def solve_fbsde(spec, grid, n_particles, epsilon, seed, continuation="off", tol=1e-6,
                max_picard=200, damping=0.5, regression=None, minimizer=None,
                initial=None, noise=None, raise_on_failure=True):
    """Solve the particle forward-backward system at viscosity ``epsilon``.

    Parameters
    ----------
    spec : ProblemSpec
    grid : TimeGrid
    n_particles : int
    epsilon : float
    seed : int
        Drives the initial sample and the Brownian increments.
    continuation : {"off", "on"}
        ``off`` runs damped Picard from Y = 0. ``on`` walks the coupling
        ladder gamma = eta, 2 eta, ..., 1 where eta <= min(0.25, 1/(2 C)) and
        C is a stability constant measured by two probe solves; each rung is
        solved by iterating the frozen-coefficient map from the previous rung.
    tol : float
        Threshold on the process norm of successive iterates.
    max_picard : int
        Iteration cap (per rung and per inner solve under continuation).
    damping : float in (0, 1]
    initial, noise : ndarray, optional
        Reuse a given initial cloud or Brownian increments.
    raise_on_failure : bool
        Raise :class:`NoConvergence` (carrying the state and the residual
        history) when the iteration cap is reached.

    Returns
    -------
    FbsdeState
    """
    if continuation not in ("off", "on"):
        raise ValueError("continuation must be 'off' or 'on'")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if continuation == "off" and admissibility_gap(spec) <= 0:
        warnings.warn("admissibility gap is not positive; Picard iteration may not converge",
                      RuntimeWarning)
    N, d = int(n_particles), spec.dim
    x0 = initial_states(spec, N, seed) if initial is None else np.asarray(initial, float).reshape(N, d)
    if noise is None:
        noise = brownian_increments(seed, grid.n_steps, N, d, grid.dt)
    ctx = _Context(spec, grid, x0, noise, float(epsilon), regression or RegressionConfig(),
                   minimizer or MinimizerConfig(), seed)
    if continuation == "off":
        state, history, ok = _iterate(ctx, _zero_state(ctx, 1.0), 1.0, None, tol, max_picard, damping)
    else:
        state, history, ok = _continuation(ctx, tol, max_picard, damping)
    state.history = history
    state.iterations = len(history)
    state.converged = ok
    if not ok and raise_on_failure:
        raise NoConvergence(
            f"no convergence after {len(history)} Picard iterations (last residual "
            f"{history[-1] if history else float('nan'):.3e})", history, state)
    return state


# decoupling field and feedback ----------------------------------------------

@dataclass
class DecouplingField:
    """Regression fit of x -> Y at each grid time, evaluable off the cloud.

    The field is piecewise constant in time: ``field(t, x)`` uses the fit at
    the last grid time not after ``t``.
    """

    grid: TimeGrid
    basis: PolynomialBasis
    centers: np.ndarray
    scales: np.ndarray
    coefs: np.ndarray
    residuals: np.ndarray
    snapshots: list

    def step_index(self, t):
        k = int(np.floor(t / self.grid.dt + 1e-9))
        return min(max(k, 0), self.grid.n_steps)

    def at_step(self, k, x):
        x = np.atleast_2d(np.asarray(x, float))
        return self.basis.design(x, self.centers[k], self.scales[k]) @ self.coefs[k]

    def __call__(self, t, x):
        return self.at_step(self.step_index(t), x)

    def slope(self, k, x):
        """Jacobian of the field at step ``k`` by central differences, shape (n, d, d)."""
        x = np.atleast_2d(np.asarray(x, float))
        d = x.shape[1]
        h = 1e-6 * np.maximum(self.scales[k], 1e-3)
        J = np.empty((x.shape[0], d, d))
        for b in range(d):
            e = np.zeros(d)
            e[b] = h[b]
            J[:, :, b] = (self.at_step(k, x + e) - self.at_step(k, x - e)) / (2 * h[b])
        return J


def extract_decoupling_field(state, regression=None):
    """Fit x -> Y_k on the particle cloud at every grid time."""
    regression = regression or RegressionConfig()
    X, Y = state.forward.states, state.adjoint_y
    n1, N, d = X.shape
    basis = PolynomialBasis(d, regression.degree)
    centers = np.empty((n1, d))
    scales = np.empty((n1, d))
    coefs = np.empty((n1, basis.size, d))
    residuals = np.empty(n1)
    for k in range(n1):
        centers[k], scales[k] = basis.standardize(X[k])
        B = basis.design(X[k], centers[k], scales[k])
        coefs[k], _ = _least_squares(B, Y[k], regression.ridge)
        residuals[k] = float(np.sqrt(np.mean(np.sum((B @ coefs[k] - Y[k]) ** 2, axis=1))))
    return DecouplingField(state.grid, basis, centers, scales, coefs, residuals,
                           [ParticleEnsemble(X[k]) for k in (0, n1 - 1)])


class ControlField:
    """Feedback control u(t, x) = a(field(t, x)) with values in U."""

    def __init__(self, field, spec, minimizer=None):
        self.field = field
        self.spec = spec
        self.minimizer = minimizer or MinimizerConfig()

    def __call__(self, t, x):
        y = self.field(t, x)
        return minimize_hamiltonian(self.spec, t, x, None, y, self.minimizer)

    def at_step(self, k, x):
        return minimize_hamiltonian(self.spec, None, x, None, self.field.at_step(k, x), self.minimizer)

    def lipschitz(self, probes, seed=0):
        """Largest difference quotient over probe pairs, per grid step.

        Parameters
        ----------
        probes : list of ndarray
            Probe points for each grid step ``k = 0..n_steps - 1``.
        """
        return empirical_lipschitz(self.at_step, probes, seed)


def empirical_lipschitz(fn, probes, seed=0):
    """max_k max over probe pairs of |fn(k, x') - fn(k, x)| / |x' - x|."""
    rng = _rng.stream(seed, "probes")
    worst = 0.0
    for k, P in enumerate(probes):
        P = np.atleast_2d(P)
        if P.shape[0] < 2:
            continue
        if P.shape[1] == 1:
            xs = np.unique(P[:, 0])
            a, b = xs[:-1, None], xs[1:, None]
        else:
            i = rng.integers(0, P.shape[0], 4 * P.shape[0])
            j = rng.integers(0, P.shape[0], 4 * P.shape[0])
            a, b = P[i], P[j]
        dx = np.linalg.norm(b - a, axis=1)
        keep = dx > 1e-12
        if not np.any(keep):
            continue
        du = np.linalg.norm(fn(k, b) - fn(k, a), axis=1)
        worst = max(worst, float(np.max(du[keep] / dx[keep])))
    return worst


def central_probes(states, n_probe=128, quantile=0.9, seed=0):
    """Per-step probe points drawn from the central part of a particle cloud."""
    rng = _rng.stream(seed, "probes")
    out = []
    for X in states:
        r = np.linalg.norm(X - X.mean(axis=0), axis=1)
        inner = X[r <= np.quantile(r, quantile)]
        take = rng.choice(inner.shape[0], size=min(n_probe, inner.shape[0]), replace=False)
        out.append(inner[take])
    return out


def feedback_control(field, spec, minimizer=None):
    """Compose the Hamiltonian minimizer with a decoupling field."""
    return ControlField(field, spec, minimizer)


def bound_checks(spec, state, slack=0.5):
    """Uniform adjoint bound check against C_3 (1 + slack)."""
    c = constants(spec)
    max_y = state.max_abs_y()
    return {"max_abs_y": max_y, "C3": c["C3"], "adjoint_bound_ok": bool(max_y <= c["C3"] * (1 + slack))}


__all__ = [
    "RegressionConfig", "PolynomialBasis", "InputTuple", "SNorm", "s_norm", "FbsdeState",
    "adjoint_driver", "terminal_condition", "backward_pass", "picard_step", "solve_fbsde",
    "estimate_stability_constant", "DecouplingField", "extract_decoupling_field",
    "ControlField", "feedback_control", "empirical_lipschitz", "central_probes",
    "bound_checks", "constants", "closed_form_constants",
]
