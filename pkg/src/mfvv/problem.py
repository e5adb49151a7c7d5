"""Problem data for viscous mean-field optimal control.

A :class:`ProblemSpec` bundles the drift ``b(t, x, mu)``, the running cost
``f``, the control cost ``psi``, the final cost ``g`` together with their
derivatives, the control set ``U`` and the initial law ``mu0``.

All callbacks are vectorized over particles. With ``n`` query points in
``R^d`` the shapes are::

    drift(t, x, mu)                  x: (n, d)        -> (n, d)
    drift_grad_x(t, x, mu)           x: (n, d)        -> (n, d, d)   [i, a, b] = d b_a / d x_b
    drift_dmu(t, x, mu, xp)          x, xp broadcast  -> (..., d, d)
    running_cost(t, x, mu)           x: (n, d)        -> (n,)
    running_cost_grad_x(t, x, mu)    x: (n, d)        -> (n, d)
    running_cost_dmu(t, x, mu, xp)   x, xp broadcast  -> (..., d)
    control_cost(alpha)              alpha: (..., d)  -> (...)
    control_cost_grad(alpha)         alpha: (..., d)  -> (..., d)
    final_cost(x, mu)                x: (n, d)        -> (n,)
    final_cost_grad_x(x, mu)         x: (n, d)        -> (n, d)
    final_cost_dmu(x, mu, xp)        x, xp broadcast  -> (..., d)

``mu`` is always a :class:`~mfvv.measures.ParticleEnsemble`. The measure
derivatives are pointwise kernels: ``drift_dmu(t, x, mu, xp)`` is the
L-derivative of ``mu -> b(t, x, mu)`` evaluated at ``xp``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from . import rng as _rng
from .exceptions import NonFiniteEvaluation, RejectedSpec, UnknownScenario, ConfigError
from .measures import ParticleEnsemble, wasserstein

LIPSCHITZ = "Lipschitz drift"
CONVEXITY = "λ-convexity"
GRADIENTS = "gradient consistency"
RADIUS = "control radius"
SUPPORT = "compact initial support"


def checked(value, what="callback"):
    """Return ``value`` as a float array, raising if any entry is NaN or infinite."""
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluation(f"{what} returned a non-finite value")
    return arr


# control sets ---------------------------------------------------------------

@dataclass(frozen=True)
class ControlSet:
    """Convex compact control set, either a box or a Euclidean ball.

    Parameters
    ----------
    kind : {"box", "ball"}
    center : ndarray, shape (d,)
    radius : ndarray, shape (d,) or float
        Half-widths per coordinate for a box, the radius for a ball.
    """

    kind: str
    center: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        r = np.asarray(self.radius, dtype=float)
        if self.kind == "box":
            r = np.broadcast_to(r, c.shape).astype(float)
        elif self.kind == "ball":
            if r.size != 1:
                raise ValueError("a ball takes a scalar radius")
            r = r.reshape(())
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")
        if np.any(r <= 0) or not np.all(np.isfinite(r)):
            raise ValueError("control set radius must be positive and finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @classmethod
    def box(cls, halfwidth, dim=1, center=None):
        c = np.zeros(dim) if center is None else center
        return cls("box", c, np.broadcast_to(np.asarray(halfwidth, float), (dim,)))

    @classmethod
    def ball(cls, radius, dim=1, center=None):
        c = np.zeros(dim) if center is None else center
        return cls("ball", c, radius)

    @property
    def dim(self):
        return self.center.shape[0]

    def project(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "box":
            return np.clip(y, self.center - self.radius, self.center + self.radius)
        v = y - self.center
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(norm, 1e-300))
        return self.center + v * scale

    def contains(self, y, tol=1e-12):
        y = np.asarray(y, dtype=float)
        if self.kind == "box":
            return np.all(np.abs(y - self.center) <= self.radius + tol, axis=-1)
        return np.linalg.norm(y - self.center, axis=-1) <= self.radius + tol

    def max_norm(self):
        """max_{u in U} |u|."""
        if self.kind == "box":
            return float(np.linalg.norm(np.abs(self.center) + self.radius))
        return float(np.linalg.norm(self.center) + self.radius)

    def sample(self, n, rng):
        """Uniform draws from U."""
        d = self.dim
        if self.kind == "box":
            u = rng.uniform(-1.0, 1.0, size=(n, d))
            return self.center + u * self.radius
        g = rng.standard_normal((n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.uniform(size=(n, 1)) ** (1.0 / d)
        return self.center + self.radius * r * g


# initial law ----------------------------------------------------------------

@dataclass(frozen=True)
class InitialMeasure:
    """Compactly supported initial law with a declared bounding box.

    Parameters
    ----------
    sampler : callable
        ``sampler(n, rng)`` returning an ``(n, d)`` array of i.i.d. draws.
    lower, upper : ndarray, shape (d,)
        Declared bounding box of the support.
    second_moment : float, optional
        Exact M_2(mu0) when known.
    pdf : callable, optional
        One-dimensional density, used to seed the grid oracle.
    """

    sampler: Callable
    lower: np.ndarray
    upper: np.ndarray
    second_moment: Optional[float] = None
    pdf: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("invalid bounding box")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def is_dirac(self):
        return bool(np.all(self.lower == self.upper))

    def sample(self, n, rng):
        pts = np.asarray(self.sampler(n, rng), dtype=float).reshape(n, self.dim)
        if np.any(pts < self.lower - 1e-12) or np.any(pts > self.upper + 1e-12):
            raise RejectedSpec(SUPPORT, "initial sample outside the declared bounding box")
        return pts

    def radius(self):
        """Radius of the smallest origin-centred ball containing the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    @classmethod
    def uniform(cls, low, high, dim=1):
        lo = np.broadcast_to(np.asarray(low, float), (dim,)).copy()
        hi = np.broadcast_to(np.asarray(high, float), (dim,)).copy()
        m2 = float(np.sum((hi**3 - lo**3) / (3 * (hi - lo))))

        def sampler(n, rng):
            return rng.uniform(lo, hi, size=(n, dim))

        pdf = None
        if dim == 1:
            def pdf(x):
                x = np.asarray(x, float)
                return np.where((x >= lo[0]) & (x <= hi[0]), 1.0 / (hi[0] - lo[0]), 0.0)
        return cls(sampler, lo, hi, m2, pdf, "uniform")

    @classmethod
    def dirac(cls, point):
        p = np.atleast_1d(np.asarray(point, float))

        def sampler(n, rng):
            return np.broadcast_to(p, (n, p.shape[0])).copy()

        return cls(sampler, p, p.copy(), float(p @ p), None, "dirac")

    @classmethod
    def scaled_beta(cls, a, b, low, high):
        """One-dimensional Beta(a, b) law stretched onto [low, high]."""
        width = high - low
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        m2 = low**2 + 2 * low * width * mean + width**2 * (var + mean**2)
        norm = special.beta(a, b)

        def sampler(n, rng):
            return low + width * rng.beta(a, b, size=(n, 1))

        def pdf(x):
            z = (np.asarray(x, float) - low) / width
            inside = (z > 0) & (z < 1)
            zc = np.clip(z, 1e-300, 1 - 1e-16)
            return np.where(inside, zc ** (a - 1) * (1 - zc) ** (b - 1) / (norm * width), 0.0)

        return cls(sampler, np.array([low]), np.array([high]), float(m2), pdf, "beta")


# problem definition ------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Full data of the deterministic and viscous mean-field control problems.

    See the module docstring for callback shapes. ``lambda_`` is the
    convexity modulus of ``control_cost``, ``lip_const`` the constant L,
    ``growth_const`` the constant M, ``control_radius`` the constant R.

    Notes
    -----
    ``kernels_ignore_xprime`` declares that every measure kernel is constant in
    its last argument, which lets the mean-field sums in the adjoint driver be
    computed in O(N) instead of O(N^2). ``quadratic_control`` declares
    ``psi = lambda_ |alpha|^2`` so the Hamiltonian minimizer has a closed form.
    """

    dim: int
    horizon: float
    drift: Callable
    drift_grad_x: Callable
    drift_dmu: Callable
    running_cost: Callable
    running_cost_grad_x: Callable
    running_cost_dmu: Callable
    control_cost: Callable
    control_cost_grad: Callable
    final_cost: Callable
    final_cost_grad_x: Callable
    final_cost_dmu: Callable
    control_set: ControlSet
    lambda_: float
    lip_const: float
    growth_const: float
    control_radius: float
    initial_measure: InitialMeasure
    name: str = "custom"
    kernels_ignore_xprime: bool = False
    quadratic_control: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dim must be a positive integer")
        for attr in ("horizon", "lambda_", "lip_const", "growth_const"):
            v = getattr(self, attr)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{attr} must be positive and finite, got {v!r}")
        if self.control_set.dim != self.dim or self.initial_measure.dim != self.dim:
            raise ValueError("control set and initial measure must match dim")
        if self.control_radius < 1:
            raise RejectedSpec(RADIUS, "R must be at least 1")

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


# constants ------------------------------------------------------------------

def lambda_threshold(T, L):
    """Admissibility threshold T L (1 + 2L) exp((6L + 1) T)."""
    return T * L * (1 + 2 * L) * np.exp((6 * L + 1) * T)


def closed_form_constants(T, L, M, R, m2):
    """The five stability constants as plain functions of (T, L, M, R, M_2(mu0))."""
    c1 = ((M + R) / (M + 1) + np.sqrt(m2 + T)) ** 2 * np.exp((M + 1) * T)
    c2 = np.exp((4 * L + 1) * T)
    c3 = (1 + 2 * L) * np.exp(2 * L * T)
    c4 = 4 * L**2 * (2 + T + T * c3**2) * np.exp((6 + 2 * L**2) * T)
    return {"C1": float(c1), "C2": float(c2), "C3": float(c3), "C4": float(c4),
            "Lambda": float(c2 * c3 * L * T)}


def initial_second_moment(spec, n_draws=100_000, seed=0):
    if spec.initial_measure.second_moment is not None:
        return float(spec.initial_measure.second_moment)
    pts = spec.initial_measure.sample(n_draws, _rng.stream(seed, "probes"))
    return float(np.mean(np.sum(pts**2, axis=1)))


def constants(spec, seed=0):
    """Return ``{C1, C2, C3, C4, Lambda}`` for ``spec``.

    M_2(mu0) is taken from the initial measure when declared, otherwise
    estimated from 1e5 draws.
    """
    m2 = initial_second_moment(spec, seed=seed)
    return closed_form_constants(spec.horizon, spec.lip_const, spec.growth_const,
                                 spec.control_radius, m2)


def admissibility_gap(spec):
    """lambda - Lambda(T, L); positive when the sufficient optimality condition holds."""
    gap = spec.lambda_ - lambda_threshold(spec.horizon, spec.lip_const)
    if not np.isfinite(gap):
        raise NonFiniteEvaluation("admissibility gap is not finite")
    return float(gap)


def second_moment_bound(spec, m2=None):
    """A-priori bound [M_2(mu0) + 2(1 + M + R) T] exp((2R + 5M) T) on M_2(mu_t)."""
    if m2 is None:
        m2 = initial_second_moment(spec)
    T, M, R = spec.horizon, spec.growth_const, spec.control_radius
    return float((m2 + 2 * (1 + M + R) * T) * np.exp((2 * R + 5 * M) * T))


# validation -----------------------------------------------------------------

@dataclass
class CheckResult:
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_spec`, one :class:`CheckResult` per assumption."""

    checks: dict

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def failed(self):
        return [k for k, c in self.checks.items() if not c.passed]

    def raise_if_failed(self):
        bad = self.failed()
        if bad:
            raise RejectedSpec(bad[0], self.checks[bad[0]].detail)

    def to_dict(self):
        return {k: {"passed": c.passed, "worst": c.worst, "detail": c.detail}
                for k, c in self.checks.items()}


def _probe_ensemble(rng, n, d, scale):
    return rng.normal(0.0, scale, size=(n, d))


def _check_lipschitz(spec, rng, n_probe, tol):
    d, T, L = spec.dim, spec.horizon, spec.lip_const
    worst = 0.0
    n_groups = max(n_probe // 10, 1)
    for _ in range(n_groups):
        t = rng.uniform(0, T)
        base = _probe_ensemble(rng, 16, d, 1.0)
        mode = rng.integers(3)
        if mode == 0:
            other = base
        elif mode == 1:
            other = base + rng.normal(0, 0.5, size=(1, d))
        else:
            other = _probe_ensemble(rng, 16, d, rng.uniform(0.5, 2.0))
        mu, nu = ParticleEnsemble(base), ParticleEnsemble(other)
        w2 = wasserstein(mu, nu, 2)
        x = rng.normal(0, 1.5, size=(10, d))
        y = x if mode == 1 else x + rng.normal(0, 0.5, size=(10, d))
        bx = checked(spec.drift(t, x, mu), "drift")
        by = checked(spec.drift(t, y, nu), "drift")
        den = np.linalg.norm(x - y, axis=1) + w2
        ok = den > 1e-12
        if np.any(ok):
            worst = max(worst, float(np.max(np.linalg.norm(bx - by, axis=1)[ok] / den[ok])))
    passed = worst <= L * (1 + tol)
    return CheckResult(passed, worst, f"observed ratio {worst:.6g} against L={L:.6g}")


def _check_convexity(spec, rng, n_probe, tol):
    a = spec.control_set.sample(n_probe, rng)
    b = spec.control_set.sample(n_probe, rng)
    psi_a = checked(spec.control_cost(a), "control_cost")
    psi_b = checked(spec.control_cost(b), "control_cost")
    grad = checked(spec.control_cost_grad(a), "control_cost_grad")
    gap = psi_b - psi_a - np.sum(grad * (b - a), axis=1)
    sq = np.sum((b - a) ** 2, axis=1)
    ok = sq > 1e-12
    ratio = gap[ok] / (spec.lambda_ * sq[ok])
    worst = float(ratio.min()) if ratio.size else 1.0
    passed = worst >= 1 - tol
    return CheckResult(passed, worst, f"worst ratio {worst:.6g} to the declared modulus {spec.lambda_:.6g}")


def _fd_close(fd, g, rtol=1e-4):
    err = np.abs(fd - g) / (1.0 + np.abs(g))
    return float(err.max()) if err.size else 0.0


def _check_gradients(spec, rng, n_probe, h=1e-5):
    d, T = spec.dim, spec.horizon
    n = min(n_probe, 200)
    t = float(rng.uniform(0, T))
    x = rng.normal(0, 1.0, size=(n, d))
    cloud = rng.normal(0, 1.0, size=(8, d))
    mu = ParticleEnsemble(cloud)
    errs = {}
    eye = np.eye(d)

    # x-gradients
    fd_b = np.empty((n, d, d))
    fd_f = np.empty((n, d))
    fd_g = np.empty((n, d))
    for k in range(d):
        xp, xm = x + h * eye[k], x - h * eye[k]
        fd_b[:, :, k] = (checked(spec.drift(t, xp, mu)) - checked(spec.drift(t, xm, mu))) / (2 * h)
        fd_f[:, k] = (checked(spec.running_cost(t, xp, mu)) - checked(spec.running_cost(t, xm, mu))) / (2 * h)
        fd_g[:, k] = (checked(spec.final_cost(xp, mu)) - checked(spec.final_cost(xm, mu))) / (2 * h)
    errs["drift_grad_x"] = _fd_close(fd_b, checked(spec.drift_grad_x(t, x, mu), "drift_grad_x"))
    errs["running_cost_grad_x"] = _fd_close(fd_f, checked(spec.running_cost_grad_x(t, x, mu), "running_cost_grad_x"))
    errs["final_cost_grad_x"] = _fd_close(fd_g, checked(spec.final_cost_grad_x(x, mu), "final_cost_grad_x"))

    # control cost, on U and slightly beyond
    a = 1.25 * spec.control_set.sample(n, rng)
    fd_psi = np.empty((n, d))
    for k in range(d):
        fd_psi[:, k] = (checked(spec.control_cost(a + h * eye[k])) - checked(spec.control_cost(a - h * eye[k]))) / (2 * h)
    errs["control_cost_grad"] = _fd_close(fd_psi, checked(spec.control_cost_grad(a), "control_cost_grad"))

    # measure kernels: moving atom j by h shifts F by w_j * dmu F(x_j) * h
    xs = x[:16]
    m = cloud.shape[0]
    e_b, e_f, e_g = 0.0, 0.0, 0.0
    for j in range(m):
        for k in range(d):
            cp, cm = cloud.copy(), cloud.copy()
            cp[j, k] += h
            cm[j, k] -= h
            mp, mm = ParticleEnsemble(cp), ParticleEnsemble(cm)
            xj = np.broadcast_to(cloud[j], xs.shape)
            fd = (spec.drift(t, xs, mp) - spec.drift(t, xs, mm)) * m / (2 * h)
            an = checked(spec.drift_dmu(t, xs, mu, xj), "drift_dmu")[:, :, k]
            e_b = max(e_b, _fd_close(checked(fd), an))
            fd = (spec.running_cost(t, xs, mp) - spec.running_cost(t, xs, mm)) * m / (2 * h)
            an = checked(spec.running_cost_dmu(t, xs, mu, xj), "running_cost_dmu")[:, k]
            e_f = max(e_f, _fd_close(checked(fd), an))
            fd = (spec.final_cost(xs, mp) - spec.final_cost(xs, mm)) * m / (2 * h)
            an = checked(spec.final_cost_dmu(xs, mu, xj), "final_cost_dmu")[:, k]
            e_g = max(e_g, _fd_close(checked(fd), an))
    errs["drift_dmu"], errs["running_cost_dmu"], errs["final_cost_dmu"] = e_b, e_f, e_g
    worst_name = max(errs, key=errs.get)
    worst = errs[worst_name]
    return CheckResult(worst <= 1e-4, worst, f"largest relative error {worst:.3g} in {worst_name}")


def _check_radius(spec, rng, n_probe):
    sampled = float(np.max(np.linalg.norm(spec.control_set.sample(n_probe, rng), axis=1)))
    needed = max(1.0, spec.control_set.max_norm(), sampled)
    ok = spec.control_radius >= needed * (1 - 1e-12)
    return CheckResult(ok, needed, f"R={spec.control_radius:.6g}, max(1, max |u|)={needed:.6g}")


def _check_support(spec, rng, n_probe):
    try:
        pts = spec.initial_measure.sample(10 * n_probe, rng)
    except RejectedSpec as exc:
        return CheckResult(False, np.inf, str(exc))
    checked(pts, "initial sampler")
    return CheckResult(True, float(np.max(np.linalg.norm(pts, axis=1))), "all samples inside the box")


def validate_spec(spec, n_probe=1000, seed=0, tol=1e-6, raise_on_failure=False):
    """Probe a spec for the structural assumptions.

    Parameters
    ----------
    spec : ProblemSpec
    n_probe : int
        Number of random probes per check, at least 100.
    seed : int
    tol : float
        Relative slack on the Lipschitz and convexity checks.
    raise_on_failure : bool
        Raise :class:`RejectedSpec` naming the first failed assumption instead
        of returning a failing report.

    Returns
    -------
    ValidationReport
    """
    if n_probe < 100:
        raise ValueError("n_probe must be at least 100")
    rng = _rng.stream(seed, "probes")
    report = ValidationReport({
        LIPSCHITZ: _check_lipschitz(spec, rng, n_probe, tol),
        CONVEXITY: _check_convexity(spec, rng, n_probe, tol),
        GRADIENTS: _check_gradients(spec, rng, n_probe),
        RADIUS: _check_radius(spec, rng, n_probe),
        SUPPORT: _check_support(spec, rng, n_probe),
    })
    if raise_on_failure:
        report.raise_if_failed()
    return report


# scenario builders ----------------------------------------------------------

def _as_matrix(v, d):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return a * np.eye(d)
    if a.shape != (d, d):
        raise ValueError(f"expected a scalar or a {d}x{d} matrix")
    return a


def quadratic_control_cost(lam):
    def psi(alpha):
        alpha = np.asarray(alpha, float)
        return lam * np.sum(alpha**2, axis=-1)

    def grad(alpha):
        return 2 * lam * np.asarray(alpha, float)

    return psi, grad


def lq_spec(dim=1, horizon=1.0, A=0.1, B=0.0, Q=0.1, QT=0.1, mean_coupling=0.0,
            lambda_=1.0, L=0.1, M=0.1, control_set=None, initial_measure=None, name="lq"):
    """Linear-quadratic mean-field problem.

    ``b = A x + B mean(mu)``, ``f = x.Qx/2 + s|mean(mu)|^2/2``,
    ``g = x.QT x/2 + s|mean(mu)|^2/2`` and ``psi = lambda_ |alpha|^2``, with
    ``s = mean_coupling``.
    """
    d = int(dim)
    A_, B_ = _as_matrix(A, d), _as_matrix(B, d)
    Q_, QT_ = _as_matrix(Q, d), _as_matrix(QT, d)
    Qs, QTs = 0.5 * (Q_ + Q_.T), 0.5 * (QT_ + QT_.T)
    s = float(mean_coupling)
    U = control_set if control_set is not None else ControlSet.box(1.0, d)
    mu0 = initial_measure if initial_measure is not None else InitialMeasure.uniform(0.0, 2.0, d)

    def drift(t, x, mu):
        return x @ A_.T + mu.mean() @ B_.T

    def drift_grad_x(t, x, mu):
        return np.broadcast_to(A_, (x.shape[0], d, d))

    def drift_dmu(t, x, mu, xp):
        shape = np.broadcast_shapes(np.shape(x), np.shape(xp))[:-1]
        return np.broadcast_to(B_, shape + (d, d))

    def _mean_term(mu, n):
        m = mu.mean()
        return np.full(n, 0.5 * s * (m @ m))

    def running_cost(t, x, mu):
        return 0.5 * np.einsum("ia,ab,ib->i", x, Qs, x) + _mean_term(mu, x.shape[0])

    def running_cost_grad_x(t, x, mu):
        return x @ Qs

    def _dmu_mean(x, mu, xp):
        shape = np.broadcast_shapes(np.shape(x), np.shape(xp))
        return np.broadcast_to(s * mu.mean(), shape)

    def running_cost_dmu(t, x, mu, xp):
        return _dmu_mean(x, mu, xp)

    def final_cost(x, mu):
        return 0.5 * np.einsum("ia,ab,ib->i", x, QTs, x) + _mean_term(mu, x.shape[0])

    def final_cost_grad_x(x, mu):
        return x @ QTs

    def final_cost_dmu(x, mu, xp):
        return _dmu_mean(x, mu, xp)

    psi, dpsi = quadratic_control_cost(lambda_)
    R = max(1.0, U.max_norm())
    params = {"A": A_, "B": B_, "Q": Qs, "QT": QTs, "mean_coupling": s}
    return ProblemSpec(
        dim=d, horizon=float(horizon), drift=drift, drift_grad_x=drift_grad_x,
        drift_dmu=drift_dmu, running_cost=running_cost,
        running_cost_grad_x=running_cost_grad_x, running_cost_dmu=running_cost_dmu,
        control_cost=psi, control_cost_grad=dpsi, final_cost=final_cost,
        final_cost_grad_x=final_cost_grad_x, final_cost_dmu=final_cost_dmu,
        control_set=U, lambda_=float(lambda_), lip_const=float(L), growth_const=float(M),
        control_radius=R, initial_measure=mu0, name=name,
        kernels_ignore_xprime=True, quadratic_control=True, params=params,
    )


def flat_phi(a):
    """Phi(a) = int_0^a exp(-1/t) dt for a >= 0, vectorized."""
    a = np.asarray(a, dtype=float)
    out = np.zeros_like(a)
    pos = a > 0
    ap = a[pos]
    out[pos] = ap * np.exp(-1.0 / ap) - special.exp1(1.0 / ap)
    return out


def flat_psi(x):
    """Convex cost vanishing on [-1, 1], smooth and growing outside.

    For |x| > 1 and a = |x| - 1 this is int_0^a Phi(s) ds, which integrates in
    closed form to (a + 1/2) Phi(a) - (a^2 / 2) exp(-1/a).
    """
    a = np.maximum(np.abs(np.asarray(x, dtype=float)) - 1.0, 0.0)
    safe = np.where(a > 0, a, 1.0)
    tail = np.where(a > 0, 0.5 * a**2 * np.exp(-1.0 / safe), 0.0)
    return (a + 0.5) * flat_phi(a) - tail


def flat_psi_grad(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * flat_phi(np.maximum(np.abs(x) - 1.0, 0.0))


def counterexample_spec(horizon=1.0):
    """One-dimensional problem with flat control cost, zero drift and costs, mu0 = delta_0."""

    def zero_vec(t, x, mu):
        return np.zeros_like(x)

    def zero_mat(t, x, mu):
        return np.zeros((x.shape[0], 1, 1))

    def zero_kernel_mat(t, x, mu, xp):
        shape = np.broadcast_shapes(np.shape(x), np.shape(xp))[:-1]
        return np.zeros(shape + (1, 1))

    def zero_kernel_vec(t, x, mu, xp):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(xp)))

    def zero_scalar(t, x, mu):
        return np.zeros(x.shape[0])

    def psi(alpha):
        return flat_psi(np.asarray(alpha, float)[..., 0])

    def dpsi(alpha):
        return flat_psi_grad(alpha)

    return ProblemSpec(
        dim=1, horizon=float(horizon), drift=zero_vec, drift_grad_x=zero_mat,
        drift_dmu=zero_kernel_mat, running_cost=zero_scalar,
        running_cost_grad_x=zero_vec, running_cost_dmu=zero_kernel_vec,
        control_cost=psi, control_cost_grad=dpsi,
        final_cost=lambda x, mu: np.zeros(x.shape[0]),
        final_cost_grad_x=lambda x, mu: np.zeros_like(x),
        final_cost_dmu=lambda x, mu, xp: zero_kernel_vec(0.0, x, mu, xp),
        control_set=ControlSet.box(1.0, 1), lambda_=1.0, lip_const=0.1,
        growth_const=0.1, control_radius=1.0, initial_measure=InitialMeasure.dirac(0.0),
        name="counterexample_flat_psi", kernels_ignore_xprime=True,
    )


def nonlinear_meanfield_spec(horizon=1.0):
    """One-dimensional nonlinear drift with a mean-field pull.

    ``b = -0.5 x + 0.3 sin(2x) + 0.5 tanh(mean(mu))``, quadratic costs, and a
    Beta(2, 2) initial law on [0, 2]. Used with fixed feedback controls.
    """
    c_x, c_s, c_m = -0.5, 0.3, 0.5

    def drift(t, x, mu):
        return c_x * x + c_s * np.sin(2 * x) + c_m * np.tanh(mu.mean())

    def drift_grad_x(t, x, mu):
        return (c_x + 2 * c_s * np.cos(2 * x))[:, :, None]

    def drift_dmu(t, x, mu, xp):
        shape = np.broadcast_shapes(np.shape(x), np.shape(xp))[:-1]
        val = c_m / np.cosh(mu.mean()[0]) ** 2
        return np.full(shape + (1, 1), val)

    def zero_kernel(t, x, mu, xp):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(xp)))

    psi, dpsi = quadratic_control_cost(1.0)
    return ProblemSpec(
        dim=1, horizon=float(horizon), drift=drift, drift_grad_x=drift_grad_x,
        drift_dmu=drift_dmu,
        running_cost=lambda t, x, mu: 0.5 * x[:, 0] ** 2,
        running_cost_grad_x=lambda t, x, mu: np.array(x, dtype=float),
        running_cost_dmu=zero_kernel,
        control_cost=psi, control_cost_grad=dpsi,
        final_cost=lambda x, mu: 0.5 * x[:, 0] ** 2,
        final_cost_grad_x=lambda x, mu: np.array(x, dtype=float),
        final_cost_dmu=lambda x, mu, xp: zero_kernel(0.0, x, mu, xp),
        control_set=ControlSet.box(1.0, 1), lambda_=1.0, lip_const=1.1,
        growth_const=1.1, control_radius=1.0,
        initial_measure=InitialMeasure.scaled_beta(2.0, 2.0, 0.0, 2.0),
        name="nonlinear_meanfield_1d", kernels_ignore_xprime=True, quadratic_control=True,
    )


SCENARIOS = {
    "lq_1d": lambda: lq_spec(A=0.1, B=0.0, Q=0.1, QT=0.1, mean_coupling=0.0, name="lq_1d"),
    "lq_meanfield_1d": lambda: lq_spec(A=0.1, B=0.1, Q=0.1, QT=0.1, mean_coupling=0.05,
                                       name="lq_meanfield_1d"),
    "counterexample_flat_psi": counterexample_spec,
    "nonlinear_meanfield_1d": nonlinear_meanfield_spec,
}


def builtin_scenario(name):
    """Return a fresh built-in :class:`ProblemSpec`.

    Parameters
    ----------
    name : {"lq_1d", "lq_meanfield_1d", "counterexample_flat_psi", "nonlinear_meanfield_1d"}
    """
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None
    return factory()


_CUSTOM_KEYS = {"dim", "horizon", "lambda", "L", "M", "control_set", "lq"}
_LQ_KEYS = {"A", "B", "Q", "QT", "mean_coupling"}


def _reject_unknown(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def spec_from_custom(block):
    """Build an LQ spec from a ``custom`` config block."""
    _reject_unknown(block, _CUSTOM_KEYS, "custom")
    missing = {"dim", "horizon", "lambda", "L", "M"} - set(block)
    if missing:
        raise ConfigError(f"custom block misses {sorted(missing)}")
    d = block["dim"]
    if not isinstance(d, int) or d < 1:
        raise ConfigError("custom.dim must be a positive integer")
    cs = block.get("control_set", {"kind": "box", "radius": 1.0})
    _reject_unknown(cs, {"kind", "radius"}, "custom.control_set")
    try:
        if cs.get("kind", "box") == "box":
            U = ControlSet.box(cs.get("radius", 1.0), d)
        elif cs["kind"] == "ball":
            U = ControlSet.ball(cs.get("radius", 1.0), d)
        else:
            raise ConfigError(f"unknown control_set.kind {cs['kind']!r}")
        lq = block.get("lq", {})
        _reject_unknown(lq, _LQ_KEYS, "custom.lq")
        return lq_spec(dim=d, horizon=block["horizon"], lambda_=block["lambda"],
                       L=block["L"], M=block["M"], control_set=U, name="custom",
                       **{k: lq[k] for k in lq})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid custom block: {exc}") from exc
