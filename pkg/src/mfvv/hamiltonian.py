"""Control Hamiltonian and its minimizer over the control set."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from . import rng as _rng
from .exceptions import DimensionMismatch, NoConvergence
from .problem import checked


@dataclass(frozen=True)
class MinimizerConfig:
    """Settings of the projected-gradient minimizer.

    Parameters
    ----------
    max_iter : int
    step_rule : {"backtracking", "fixed"}
        Armijo backtracking with factor 0.5, or a fixed step 1/(2 lambda + 1).
    tol_grad_map : float
        Tolerance on the projected-gradient residual
        ``|a - proj(a - (y + grad psi(a)))|``.
    closed_form : bool
        Use ``proj(-y / (2 lambda))`` when the problem declares a quadratic cost.
    strict : bool
        Raise :class:`NoConvergence` instead of warning when ``max_iter`` is hit.
    """

    max_iter: int = 1000
    step_rule: str = "backtracking"
    tol_grad_map: float = 1e-10
    closed_form: bool = True
    strict: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol_grad_map <= 0:
            raise ValueError("tol_grad_map must be positive")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


DEFAULT = MinimizerConfig()


def hamiltonian(spec, t, x, mu, y, alpha):
    """H = (b(t, x, mu) + alpha).y + f(t, x, mu) + psi(alpha), one value per row.

    Controls outside U are projected first and a warning is issued.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.broadcast_to(np.asarray(y, float), x.shape)
    alpha = np.broadcast_to(np.asarray(alpha, float), x.shape)
    inside = spec.control_set.contains(alpha)
    if not np.all(inside):
        warnings.warn("control outside U was projected before evaluating H", UserWarning)
        alpha = spec.control_set.project(alpha)
    b = checked(spec.drift(t, x, mu), "drift")
    f = checked(spec.running_cost(t, x, mu), "running_cost")
    psi = checked(spec.control_cost(alpha), "control_cost")
    return np.sum((b + alpha) * y, axis=1) + f + psi


def grad_map_residual(spec, y, alpha):
    """|alpha - proj_U(alpha - (y + grad psi(alpha)))| per row."""
    g = y + spec.control_cost_grad(alpha)
    return np.linalg.norm(alpha - spec.control_set.project(alpha - g), axis=-1)


def _closed_form(spec, y):
    return spec.control_set.project(-y / (2.0 * spec.lambda_))


def _projected_gradient(spec, y, cfg):
    U = spec.control_set
    lam = spec.lambda_
    s0 = 1.0 / (2.0 * lam + 1.0)

    def phi(a, yy):
        return np.sum(a * yy, axis=-1) + spec.control_cost(a)

    alpha = U.project(np.zeros_like(y))
    step = np.full(y.shape[0], s0)
    res = np.full(y.shape[0], np.inf)
    active = np.ones(y.shape[0], dtype=bool)
    it = 0
    for it in range(1, cfg.max_iter + 1):
        idx = np.nonzero(active)[0]
        a, yy = alpha[idx], y[idx]
        g = checked(yy + spec.control_cost_grad(a), "control_cost_grad")
        res[idx] = np.linalg.norm(a - U.project(a - g), axis=1)
        done = res[idx] <= cfg.tol_grad_map
        active[idx[done]] = False
        idx, a, yy, g = idx[~done], a[~done], yy[~done], g[~done]
        if idx.size == 0:
            break
        s = step[idx]
        if cfg.step_rule == "backtracking":
            f0 = phi(a, yy)
            for _ in range(60):
                cand = U.project(a - s[:, None] * g)
                dlt = cand - a
                rhs = f0 + np.sum(g * dlt, axis=1) + np.sum(dlt**2, axis=1) / (2 * s)
                bad = phi(cand, yy) > rhs + 1e-15 * np.abs(f0)
                if not np.any(bad):
                    break
                s = np.where(bad, 0.5 * s, s)
            step[idx] = s
        alpha[idx] = U.project(a - s[:, None] * g)
    final = grad_map_residual(spec, y, alpha)
    return alpha, final, it


def minimize_hamiltonian(spec, t, x, mu, y, cfg=None, return_info=False):
    """Minimize alpha -> H(t, x, mu, y, alpha) over U.

    Only the terms ``alpha.y + psi(alpha)`` depend on alpha, so the result
    depends on ``y`` alone; ``t``, ``x`` and ``mu`` are accepted for
    signature symmetry with :func:`hamiltonian` and ignored.

    Parameters
    ----------
    y : array_like, shape (..., d)
        Adjoint values, vectorized over leading axes.
    cfg : MinimizerConfig, optional
    return_info : bool
        Also return ``{"iterations", "residual", "converged"}``.

    Returns
    -------
    alpha : ndarray, shape (..., d)
    """
    cfg = cfg or DEFAULT
    y = checked(y, "adjoint")
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape[-1] != spec.dim:
        raise DimensionMismatch(f"adjoint has trailing size {y.shape[-1]}, expected {spec.dim}")
    shape = y.shape
    flat = y.reshape(-1, spec.dim)
    if spec.quadratic_control and cfg.closed_form:
        alpha = _closed_form(spec, flat)
        info = {"iterations": 0, "residual": 0.0, "converged": True}
    else:
        alpha, res, it = _projected_gradient(spec, flat, cfg)
        worst = float(res.max()) if res.size else 0.0
        info = {"iterations": it, "residual": worst, "converged": worst <= cfg.tol_grad_map}
        if not info["converged"]:
            msg = f"Hamiltonian minimizer stopped at residual {worst:.3e} after {it} iterations"
            if cfg.strict:
                raise NoConvergence(msg, state=alpha.reshape(shape))
            warnings.warn(msg, ConvergenceWarning)
    alpha = alpha.reshape(shape)
    if return_info:
        return alpha, info
    return alpha


def verify_minimizer_lipschitz(spec, n_pairs=10_000, seed=0, cfg=None):
    """Largest observed ratio |a(y') - a(y)| / |y' - y| over random pairs.

    Half of the pairs are far apart and half are close, so both the
    saturated and the interior regime of the minimizer are exercised.
    Pairs with |y' - y| < 1e-12 are skipped.
    """
    rng = _rng.stream(seed, "probes")
    d = spec.dim
    scale = 4.0 * spec.lambda_ * spec.control_radius
    y = rng.normal(0.0, scale, size=(n_pairs, d))
    far = rng.normal(0.0, scale, size=(n_pairs // 2, d))
    near = y[n_pairs // 2:] + rng.normal(0.0, 1e-3 * scale, size=(n_pairs - n_pairs // 2, d))
    yp = np.concatenate([far, near])
    a = minimize_hamiltonian(spec, 0.0, None, None, y, cfg)
    ap = minimize_hamiltonian(spec, 0.0, None, None, yp, cfg)
    dy = np.linalg.norm(yp - y, axis=1)
    keep = dy >= 1e-12
    if not np.any(keep):
        return 0.0
    return float(np.max(np.linalg.norm(ap - a, axis=1)[keep] / dy[keep]))
