"""Empirical probability measures, moments and Wasserstein distances.

Distances are computed exactly in one dimension (quantile coupling), exactly
through the discrete transport linear program for small supports, and
approximately with log-domain Sinkhorn iterations otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, sparse
from scipy.special import logsumexp

from .exceptions import DimensionMismatch, GridMismatch, SizeLimit, WitnessNotLipschitz

LP_PAIR_LIMIT = 1_000_000
# auto method switches from LP to Sinkhorn above this many support pairs
AUTO_LP_PAIRS = 40_000


class ParticleEnsemble:
    """Weighted point cloud standing for an empirical measure on R^d.

    Parameters
    ----------
    points : array-like, shape (n, d) or (n,)
        Particle positions. A 1-D array is read as n points in R^1.
    weights : array-like, shape (n,), optional
        Nonnegative masses summing to one. Equal weights when omitted.
    """

    __slots__ = ("points", "weights", "uniform", "_mean")

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must have shape (n, d) with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("particle coordinates must be finite")
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
            uniform = True
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.shape[0] != n:
                raise ValueError("weights and points disagree in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
            uniform = bool(np.all(w == w[0]))
        pts = pts.copy() if pts.base is not None or pts.flags.writeable else pts
        pts.setflags(write=False)
        w.setflags(write=False)
        self.points = pts
        self.weights = w
        self.uniform = uniform
        self._mean = None

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def mean(self):
        if self._mean is None:
            m = self.weights @ self.points
            m.setflags(write=False)
            self._mean = m
        return self._mean

    def reflect(self):
        return ParticleEnsemble(-self.points, self.weights)

    def __repr__(self):
        return f"ParticleEnsemble(n={self.n}, dim={self.dim})"


def dirac(point):
    """Single-atom ensemble at ``point``."""
    return ParticleEnsemble(np.atleast_1d(np.asarray(point, dtype=float))[None, :])


def moment(mu, p):
    """Return the p-th moment sum_i w_i |x_i|^p."""
    if p < 1:
        raise ValueError("moment order must be >= 1")
    norms = np.linalg.norm(mu.points, axis=1)
    return float(mu.weights @ norms**p)


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling between two ensembles.

    ``sources[k], targets[k]`` index the k-th support pair and ``masses[k]``
    the mass moved along it.
    """

    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray
    n_source: int
    n_target: int

    def marginals(self):
        row = np.bincount(self.sources, weights=self.masses, minlength=self.n_source)
        col = np.bincount(self.targets, weights=self.masses, minlength=self.n_target)
        return row, col

    def check(self, mu, nu, tol=1e-9):
        row, col = self.marginals()
        return bool(np.max(np.abs(row - mu.weights)) <= tol and np.max(np.abs(col - nu.weights)) <= tol)

    def cost(self, mu, nu, p):
        d = np.linalg.norm(mu.points[self.sources] - nu.points[self.targets], axis=1)
        return float(self.masses @ d**p)


def _check_dims(mu, nu):
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"ensembles live in R^{mu.dim} and R^{nu.dim}")


def _stable_order(x):
    # ties broken by particle index
    return np.argsort(x, kind="stable")


def _exact1d_cost(mu, nu, p):
    xa = mu.points[:, 0]
    xb = nu.points[:, 0]
    ia = _stable_order(xa)
    ib = _stable_order(xb)
    xa, xb = xa[ia], xb[ib]
    if mu.uniform and nu.uniform and mu.n == nu.n:
        return float(np.mean(np.abs(xa - xb) ** p))
    ca = np.cumsum(mu.weights[ia])
    cb = np.cumsum(nu.weights[ib])
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    lower = np.concatenate(([0.0], breaks[:-1]))
    mass = breaks - lower
    keep = mass > 0
    mid = 0.5 * (lower + breaks)[keep]
    ja = np.minimum(np.searchsorted(ca, mid, side="right"), mu.n - 1)
    jb = np.minimum(np.searchsorted(cb, mid, side="right"), nu.n - 1)
    return float(mass[keep] @ (np.abs(xa[ja] - xb[jb]) ** p))


def _cost_matrix(mu, nu, p):
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.linalg.norm(diff, axis=2) ** p


def optimal_plan(mu, nu, p=2):
    """Solve the discrete transport linear program exactly.

    Equal-size, equal-weight problems reduce to an assignment problem; the
    general case goes to the HiGHS dual simplex.
    """
    _check_dims(mu, nu)
    if mu.n * nu.n > LP_PAIR_LIMIT:
        raise SizeLimit(f"{mu.n}x{nu.n} support pairs exceed the LP budget of {LP_PAIR_LIMIT}")
    C = _cost_matrix(mu, nu, p)
    if mu.uniform and nu.uniform and mu.n == nu.n:
        rows, cols = optimize.linear_sum_assignment(C)
        return TransportPlan(rows, cols, np.full(mu.n, 1.0 / mu.n), mu.n, nu.n)
    n, m = C.shape
    eye_n = sparse.identity(n, format="csr")
    eye_m = sparse.identity(m, format="csr")
    A_eq = sparse.vstack(
        [sparse.kron(eye_n, np.ones((1, m))), sparse.kron(np.ones((1, n)), eye_m)],
        format="csr",
    )
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = optimize.linprog(
        C.ravel(),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    x = np.clip(res.x, 0.0, None)
    nz = np.nonzero(x > 0)[0]
    return TransportPlan(nz // m, nz % m, x[nz], n, m)


def sinkhorn_cost(mu, nu, p=2, reg=None, max_iter=5000, tol=1e-9):
    """Entropic transport cost with an a-posteriori marginal bound.

    Returns
    -------
    cost : float
        <P, C> for the entropic plan P (not raised to 1/p).
    info : dict
        ``reg``, ``marginal_violation`` (L1 violation of the row marginal;
        the column marginal is matched exactly), ``cost_error_bound`` (how far
        the cost may move when P is rounded onto the transport polytope) and
        ``iterations``.
    """
    _check_dims(mu, nu)
    C = _cost_matrix(mu, nu, p)
    cmax = float(C.max())
    if reg is None:
        reg = 1e-2 * max(cmax, 1e-12)
    loga = np.log(np.maximum(mu.weights, 1e-300))
    logb = np.log(np.maximum(nu.weights, 1e-300))
    f = np.zeros(mu.n)
    g = np.zeros(nu.n)
    viol = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = reg * (loga - logsumexp((g[None, :] - C) / reg, axis=1))
        g = reg * (logb - logsumexp((f[:, None] - C) / reg, axis=0))
        if it % 10 == 0 or it == max_iter:
            P = np.exp((f[:, None] + g[None, :] - C) / reg)
            viol = float(np.abs(P.sum(axis=1) - mu.weights).sum())
            if viol <= tol:
                break
    P = np.exp((f[:, None] + g[None, :] - C) / reg)
    viol = float(np.abs(P.sum(axis=1) - mu.weights).sum())
    info = {
        "reg": float(reg),
        "marginal_violation": viol,
        "cost_error_bound": 2.0 * viol * cmax,
        "iterations": it,
    }
    return float(np.sum(P * C)), info


def wasserstein(mu, nu, p=2, method="auto", reg=None, return_info=False):
    """Wasserstein distance W_p between two ensembles.

    Parameters
    ----------
    p : {1, 2}
    method : {"auto", "exact1d", "lp", "sinkhorn"}
        ``auto`` picks exact1d in one dimension, the LP for small supports and
        Sinkhorn otherwise.
    reg : float, optional
        Entropic regularization for ``sinkhorn``.
    return_info : bool
        Also return a dict with the method used and, for Sinkhorn, the
        marginal-violation bound.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    _check_dims(mu, nu)
    if method == "auto":
        if mu.dim == 1:
            method = "exact1d"
        elif mu.n * nu.n <= AUTO_LP_PAIRS:
            method = "lp"
        else:
            method = "sinkhorn"
    info = {"method": method}
    if method == "exact1d":
        if mu.dim != 1:
            raise DimensionMismatch("exact1d requires one-dimensional ensembles")
        cost = _exact1d_cost(mu, nu, p)
    elif method == "lp":
        cost = optimal_plan(mu, nu, p).cost(mu, nu, p)
    elif method == "sinkhorn":
        cost, extra = sinkhorn_cost(mu, nu, p, reg=reg)
        info.update(extra)
    else:
        raise ValueError(f"unknown method {method!r}")
    value = max(cost, 0.0) ** (1.0 / p)
    if return_info:
        return value, info
    return value


def _check_witness(phi, pts, rng, tol):
    n = pts.shape[0]
    if n <= 64:
        i, j = np.triu_indices(n, k=1)
    else:
        i = rng.integers(0, n, 2048)
        j = rng.integers(0, n, 2048)
    a = np.concatenate([pts[i], pts + 1e-3 * rng.standard_normal(pts.shape)])
    b = np.concatenate([pts[j], pts])
    va = np.asarray(phi(a), dtype=float).reshape(-1)
    vb = np.asarray(phi(b), dtype=float).reshape(-1)
    gap = np.abs(va - vb) - np.linalg.norm(a - b, axis=1)
    if gap.size and gap.max() > tol:
        raise WitnessNotLipschitz(f"witness exceeds slope 1 by {gap.max():.3e}")


def kantorovich_w1_lower_bound(mu, nu, witnesses, tol=1e-8, seed=0):
    """Dual lower bound max_phi int phi d(mu - nu) over 1-Lipschitz witnesses.

    Each witness maps an (n, d) array to n values and is checked for the
    Lipschitz property on sampled pairs before use.
    """
    _check_dims(mu, nu)
    rng = np.random.default_rng(seed)
    pts = np.concatenate([mu.points, nu.points])
    best = -np.inf
    for phi in witnesses:
        _check_witness(phi, pts, rng, tol)
        val = mu.weights @ np.asarray(phi(mu.points), float).reshape(-1)
        val -= nu.weights @ np.asarray(phi(nu.points), float).reshape(-1)
        best = max(best, float(val))
    return best


def _as_path(path):
    if hasattr(path, "ensembles"):
        return path.ensembles(), np.asarray(path.times)
    return list(path), None


def wasserstein_path(path_a, path_b, p=2, method="auto"):
    """Per-time distances between two ensemble paths on a common grid."""
    ea, ta = _as_path(path_a)
    eb, tb = _as_path(path_b)
    if len(ea) != len(eb):
        raise GridMismatch(f"paths have {len(ea)} and {len(eb)} time points")
    if ta is not None and tb is not None and not np.allclose(ta, tb, rtol=0, atol=1e-12):
        raise GridMismatch("paths are recorded on different time grids")
    for a, b in zip(ea, eb):
        _check_dims(a, b)
    return np.array([wasserstein(a, b, p, method=method) for a, b in zip(ea, eb)])


def sup_wasserstein_path(path_a, path_b, p=2):
    """max over grid times of W_p between matched ensembles."""
    return float(np.max(wasserstein_path(path_a, path_b, p)))


def write_snapshot(path, mu, t):
    """Write an ensemble as a text table with a ``d N t`` header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([mu.points, mu.weights])
    with open(path, "w") as fh:
        fh.write(f"{mu.dim} {mu.n} {float(t)!r}\n")
        np.savetxt(fh, table, fmt="%.17g")


def read_snapshot(path):
    with open(path) as fh:
        d, n, t = fh.readline().split()
        d, n, t = int(d), int(n), float(t)
        table = np.loadtxt(fh, ndmin=2)
    if table.shape != (n, d + 1):
        raise ValueError(f"snapshot body has shape {table.shape}, header says ({n}, {d + 1})")
    w = table[:, d]
    return ParticleEnsemble(table[:, :d], w / w.sum()), t
