"""Vanishing-viscosity experiments and the flat-cost counterexample."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import rng as _rng
from .exceptions import NoConvergence
from .fbsde import (RegressionConfig, bound_checks, central_probes, extract_decoupling_field,
                    feedback_control, solve_fbsde)
from .forward import second_moment_bound_check, simulate_forward
from .measures import ParticleEnsemble, dirac, wasserstein, wasserstein_path
from .problem import builtin_scenario, checked

CSV_HEADER = ["epsilon", "cost", "sup_w2", "control_l2_gap", "control_lip", "picard_iters"]

# Lower bound on D(eps) for the counterexample, frozen from a pilot run
# (N = 8192, T = 1, 256 steps, seeds 0-4, eps in {0.5, 0.25, 0.125}) whose
# smallest observed value was 1.56 (at eps = 0.125).
COUNTEREXAMPLE_FLOOR = 1.25
MIN_SUFFICIENT_N = 256


def cost_samples(spec, paths, controls=None):
    """Per-particle cost g(X_T) + sum_k dt (f(t_k, X_k) + psi(alpha_k))."""
    X = paths.states
    a = paths.controls if controls is None else controls
    grid = paths.grid
    n = grid.n_steps
    times, dt = grid.times, grid.dt
    total = checked(spec.final_cost(X[n], ParticleEnsemble(X[n])), "final_cost").copy()
    for k in range(n):
        f = checked(spec.running_cost(times[k], X[k], ParticleEnsemble(X[k])), "running_cost")
        total += dt * (f + checked(spec.control_cost(a[k]), "control_cost"))
    return total


def evaluate_cost(spec, paths, controls=None, return_std=False):
    """Monte Carlo estimate of the cost, rectangle rule in time.

    Parameters
    ----------
    return_std : bool
        Also return the standard error (sample std / sqrt(N)).
    """
    c = cost_samples(spec, paths, controls)
    mean = float(np.mean(c))
    if return_std:
        return mean, float(np.std(c, ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0
    return mean


# test dictionaries for weak pairings -----------------------------------------

def _bump(r):
    out = np.zeros_like(r)
    inside = r < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def pairing_fields(reference_states, horizon, n_centers=8):
    """Sixteen smooth compactly supported fields phi(t, x).

    Eight spatial bumps centred at quantiles of the reference cloud, each
    multiplied by 1 or cos(pi t / T).
    """
    pts = reference_states.reshape(-1, reference_states.shape[-1])
    lo, hi = np.quantile(pts, 0.02, axis=0), np.quantile(pts, 0.98, axis=0)
    width = max(float(np.max(hi - lo)) / 4.0, 1e-3)
    fracs = (np.arange(n_centers) + 0.5) / n_centers
    centers = lo + fracs[:, None] * (hi - lo)
    fields = []
    for c in centers:
        for modulated in (False, True):
            def phi(t, x, c=c, modulated=modulated):
                r = np.linalg.norm(x - c, axis=-1) / width
                w = np.cos(np.pi * t / horizon) if modulated else 1.0
                return w * _bump(r)
            fields.append(phi)
    return fields


def _pairings(control_a, control_b, ref_states, grid, fields):
    """Return (value pairings, gradient pairings) of u_a - u_b against the fields."""
    dt, times = grid.dt, grid.times
    vals = np.zeros(len(fields))
    grads = np.zeros(len(fields))
    for k in range(grid.n_steps):
        X = ref_states[k]
        diff = control_a.at_step(k, X) - control_b.at_step(k, X)
        h = 1e-4 * max(float(np.std(X)), 1e-3)
        dgrad = np.zeros_like(diff)
        for b in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[b] = h
            da = control_a.at_step(k, X + e) - control_a.at_step(k, X - e)
            db = control_b.at_step(k, X + e) - control_b.at_step(k, X - e)
            dgrad[:, b] = ((da - db) / (2 * h))[:, b]
        for m, phi in enumerate(fields):
            w = phi(times[k], X)
            vals[m] += dt * float(np.mean(np.sum(diff, axis=1) * w))
            grads[m] += dt * float(np.mean(np.sum(dgrad, axis=1) * w))
    return vals, grads


# sweep ------------------------------------------------------------------------

@dataclass
class SweepRecord:
    epsilon: float
    cost: float
    cost_std: float
    sup_w2: float
    control_l2_gap: float
    control_lip: float
    picard_iters: int
    converged: bool
    seed: int
    n_steps: int
    n_particles: int
    residual_history: list = field(default_factory=list)
    bound_checks: dict = field(default_factory=dict)
    weak_pairing_max: float = 0.0
    gradient_pairing_max: float = 0.0


@dataclass
class SweepReport:
    """Per-viscosity diagnostics followed by the inviscid limit record."""

    scenario: str
    records: list
    verdicts: dict
    solver: dict
    paths: dict = field(default=None, repr=False, compare=False)

    @property
    def limit(self):
        return self.records[-1]

    @property
    def all_converged(self):
        return all(r.converged for r in self.records)

    @property
    def trends_ok(self):
        return all(self.verdicts.values())

    def exit_code(self):
        if not self.all_converged:
            return 3
        return 0 if self.trends_ok else 4

    def to_dict(self):
        return {"scenario": self.scenario, "solver": self.solver, "verdicts": self.verdicts,
                "records": [asdict(r) for r in self.records]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        # one row per ladder viscosity; the inviscid reference lives in the JSON report
        for r in self.records[:-1]:
            w.writerow([repr(float(r.epsilon)), repr(float(r.cost)), repr(float(r.sup_w2)),
                        repr(float(r.control_l2_gap)), repr(float(r.control_lip)), str(int(r.picard_iters))])
        return buf.getvalue()

    def write(self, out_dir, stem="sweep"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.csv").write_text(self.to_csv())
        return out / f"{stem}.json", out / f"{stem}.csv"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def _check_ladder(eps_ladder, allow_zero=False):
    eps = [float(e) for e in eps_ladder]
    if not eps:
        raise ValueError("epsilon ladder is empty")
    lo = 0.0 if allow_zero else np.nextafter(0.0, 1.0)
    if any(e < lo or e > 1 for e in eps):
        raise ValueError("ladder entries must lie in (0, 1]")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon ladder must be strictly decreasing")
    return eps


def _ladder_seed(seed, index, shared):
    if shared:
        return int(seed)
    return int(_rng.stream(seed, f"ladder-{index}").integers(2**31 - 1))


def _solve(spec, grid, n_particles, eps, seed, solver):
    try:
        return solve_fbsde(spec, grid, n_particles, eps, seed, **solver), True
    except NoConvergence as exc:
        return exc.state, False


def run_sweep(spec, grid, n_particles, eps_ladder, seed, tol=1e-6, max_picard=200,
              damping=0.5, continuation="off", basis_degree=3, shared_noise=True, progress=None, workers=1):
    """Solve across a viscosity ladder and the inviscid limit, and compare.

    Parameters
    ----------
    spec : ProblemSpec
    grid : TimeGrid
    n_particles : int
    eps_ladder : sequence of float
        Strictly decreasing positive viscosities.
    seed : int
    shared_noise : bool
        Reuse one set of Brownian increments for every viscosity (scaled by
        sqrt(2 eps)); otherwise each rung gets its own stream.
    progress : callable, optional
        Called with a short status string after each solve.
    workers : int
        Number of ladder rungs solved concurrently.

    Returns
    -------
    SweepReport
    """
    eps = _check_ladder(eps_ladder)
    solver = {"tol": tol, "max_picard": max_picard, "damping": damping,
              "continuation": continuation, "regression": RegressionConfig(degree=basis_degree),
              "raise_on_failure": True}
    ladder = eps + [0.0]
    seeds = [_ladder_seed(seed, i, shared_noise) if e > 0 else int(seed) for i, e in enumerate(ladder)]

    def one(args):
        e, s = args
        state, ok = _solve(spec, grid, n_particles, e, s, solver)
        if progress:
            progress(f"epsilon={e!r} converged={ok} iterations={len(state.history)}")
        return e, s, state, ok

    # rungs are independent; map keeps ladder order so the merge is deterministic
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, zip(ladder, seeds)))
    else:
        runs = [one(a) for a in zip(ladder, seeds)]
    _, _, ref, _ = runs[-1]
    reg = RegressionConfig(degree=basis_degree)
    controls = [feedback_control(extract_decoupling_field(st, reg), spec) for _, _, st, _ in runs]
    u0 = controls[-1]
    ref_states = ref.forward.states
    probes = central_probes(ref_states[:-1], seed=seed)
    fields = pairing_fields(ref_states, spec.horizon)
    dt = grid.dt
    records = []
    for (e, s, st, ok), u in zip(runs, controls):
        cost, std = evaluate_cost(spec, st.forward, st.controls, return_std=True)
        sup_w2 = float(np.max(wasserstein_path(st.forward, ref.forward, 2)))
        gap = 0.0
        for k in range(grid.n_steps):
            diff = u.at_step(k, ref_states[k]) - u0.at_step(k, ref_states[k])
            gap += dt * float(np.mean(np.sum(diff**2, axis=1)))
        vals, grads = _pairings(u, u0, ref_states, grid, fields)
        m2_obs, m2_bound = second_moment_bound_check(st.forward, spec)
        checks = bound_checks(spec, st)
        checks.update({"second_moment": m2_obs, "second_moment_bound": m2_bound,
                       "second_moment_ok": bool(m2_obs <= m2_bound)})
        records.append(SweepRecord(
            epsilon=e, cost=cost, cost_std=std, sup_w2=sup_w2, control_l2_gap=gap,
            control_lip=u.lipschitz(probes, seed), picard_iters=len(st.history), converged=ok,
            seed=s, n_steps=grid.n_steps, n_particles=int(n_particles),
            residual_history=[float(h) for h in st.history], bound_checks=checks,
            weak_pairing_max=float(np.max(np.abs(vals))),
            gradient_pairing_max=float(np.max(np.abs(grads))),
        ))
    visc, lim = records[:-1], records[-1]
    verdicts = {
        "sup_w2_decreasing": all(b.sup_w2 < a.sup_w2 for a, b in zip(visc, visc[1:])),
        "control_gap_decreasing": all(b.control_l2_gap < a.control_l2_gap for a, b in zip(visc, visc[1:])),
        "cost_ordering": all(lim.cost <= r.cost + 3 * np.hypot(lim.cost_std, r.cost_std) for r in visc),
        "lipschitz_band": max(r.control_lip for r in visc) <= 1.25 * lim.control_lip,
    }
    solver_info = {k: v for k, v in solver.items() if k not in ("regression", "raise_on_failure")}
    solver_info.update({"basis_degree": basis_degree, "shared_noise": shared_noise})
    paths = {e: st.forward for e, _, st, _ in runs}
    return SweepReport(spec.name, records, verdicts, solver_info, paths)


# counterexample -------------------------------------------------------------

def sign_control(t, x):
    """sign(x) with sign(0) = 0."""
    return np.sign(x)


@dataclass
class CounterexampleRecord:
    epsilon: float
    cost: float
    distance_to_branches: float
    branch_distances: dict
    symmetry_w1: float
    symmetry_bound: float
    symmetry_ok: bool


@dataclass
class CounterexampleReport:
    records: list
    floor: float
    n_particles: int
    n_steps: int
    seed: int
    statistically_insufficient: bool

    @property
    def floor_holds(self):
        if self.statistically_insufficient or not self.records:
            return False
        return all(r.distance_to_branches >= self.floor for r in self.records if r.epsilon > 0)

    @property
    def cost_zero(self):
        return all(r.cost == 0.0 for r in self.records)

    def exit_code(self):
        return 0 if self.floor_holds else 4

    def to_dict(self):
        return {"floor": self.floor, "floor_holds": self.floor_holds, "cost_zero": self.cost_zero,
                "n_particles": self.n_particles, "n_steps": self.n_steps, "seed": self.seed,
                "statistically_insufficient": self.statistically_insufficient,
                "records": [asdict(r) for r in self.records]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "cost", "distance_to_branches", "symmetry_w1"])
        for r in self.records:
            w.writerow([repr(float(r.epsilon)), repr(float(r.cost)),
                        repr(float(r.distance_to_branches)), repr(float(r.symmetry_w1))])
        return buf.getvalue()

    def write(self, out_dir, stem="counterexample"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.csv").write_text(self.to_csv())
        return out / f"{stem}.json", out / f"{stem}.csv"


def branch_distance(paths, c):
    """sup_t W_2(cloud_t, delta_{c t})."""
    return max(wasserstein(paths.ensemble(k), dirac([c * t]), 2)
               for k, t in enumerate(paths.times))


def run_counterexample(grid, n_particles, eps_ladder, seed, floor=COUNTEREXAMPLE_FLOOR, spec=None):
    """Simulate the sign feedback for each viscosity and measure the distance
    to both deterministic branches x(t) = +t and x(t) = -t.

    Returns
    -------
    CounterexampleReport
    """
    eps = _check_ladder(eps_ladder, allow_zero=True)
    spec = spec or builtin_scenario("counterexample_flat_psi")
    if spec.dim != 1:
        raise ValueError("the counterexample is one-dimensional")
    N = int(n_particles)
    records = []
    for e in eps:
        paths = simulate_forward(spec, grid, N, e, sign_control, seed)
        cost = evaluate_cost(spec, paths)
        dists = {"+1": branch_distance(paths, 1.0), "-1": branch_distance(paths, -1.0)}
        sym = 0.0
        for k in range(1, grid.n_steps + 1):
            mu = paths.ensemble(k)
            scale = 2.0 * np.sqrt(np.mean(mu.points**2))
            if scale > 0:
                sym = max(sym, wasserstein(mu, mu.reflect(), 1) / scale)
        bound = 3.0 / np.sqrt(N)
        records.append(CounterexampleRecord(e, cost, min(dists.values()), dists, sym, bound,
                                            bool(sym <= bound)))
    return CounterexampleReport(records, float(floor), N, grid.n_steps, int(seed),
                                N < MIN_SUFFICIENT_N)
