"""Estimator-style wrapper around the forward-backward solver."""
from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fbsde import RegressionConfig, extract_decoupling_field, feedback_control, solve_fbsde
from .forward import TimeGrid
from .lab import evaluate_cost
from .problem import ProblemSpec, builtin_scenario


class ViscousControlSolver(TransformerMixin, BaseEstimator):
    """Fit the optimal feedback control of a viscous mean-field problem.

    ``fit`` takes the initial particle cloud (or samples one from the
    problem's initial law) and solves the forward-backward system;
    ``predict`` evaluates the feedback control and ``transform`` the
    decoupling field at arbitrary states.

    Parameters
    ----------
    scenario : str or ProblemSpec
    epsilon : float
    n_steps : int
    n_particles : int
        Cloud size when ``fit`` is called without data.
    seed : int
    tol, max_picard, damping, continuation, basis_degree
        Forwarded to :func:`~mfvv.fbsde.solve_fbsde`.

    Attributes
    ----------
    state_ : FbsdeState
    field_ : DecouplingField
    control_ : ControlField
    cost_ : float
    n_features_in_ : int

    Examples
    --------
    >>> est = ViscousControlSolver("lq_1d", epsilon=0.0, n_steps=16, n_particles=256)
    >>> est.fit().predict([[1.0]], t=0.0).shape
    (1, 1)
    """

    def __init__(self, scenario="lq_meanfield_1d", epsilon=0.25, n_steps=64, n_particles=4096,
                 seed=0, tol=1e-6, max_picard=200, damping=0.5, continuation="off",
                 basis_degree=3):
        self.scenario = scenario
        self.epsilon = epsilon
        self.n_steps = n_steps
        self.n_particles = n_particles
        self.seed = seed
        self.tol = tol
        self.max_picard = max_picard
        self.damping = damping
        self.continuation = continuation
        self.basis_degree = basis_degree

    def _spec(self):
        if isinstance(self.scenario, ProblemSpec):
            return self.scenario
        return builtin_scenario(self.scenario)

    def fit(self, X=None, y=None):
        spec = self._spec()
        initial = None
        n = self.n_particles
        if X is not None:
            initial = check_array(X, ensure_min_samples=2)
            if initial.shape[1] != spec.dim:
                raise ValueError(f"X has {initial.shape[1]} features, the problem has dim {spec.dim}")
            n = initial.shape[0]
        grid = TimeGrid(spec.horizon, self.n_steps)
        reg = RegressionConfig(degree=self.basis_degree)
        self.state_ = solve_fbsde(spec, grid, n, self.epsilon, self.seed,
                                  continuation=self.continuation, tol=self.tol,
                                  max_picard=self.max_picard, damping=self.damping,
                                  regression=reg, initial=initial)
        self.field_ = extract_decoupling_field(self.state_, reg)
        self.control_ = feedback_control(self.field_, spec)
        self.cost_ = evaluate_cost(spec, self.state_.forward, self.state_.controls)
        self.n_features_in_ = spec.dim
        return self

    def _check_X(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X, t=0.0):
        """Feedback control u(t, x) at each row of ``X``."""
        X = self._check_X(X)
        return self.control_(t, X)

    def transform(self, X, t=0.0):
        """Decoupling field value at each row of ``X``."""
        X = self._check_X(X)
        return self.field_(t, X)

    def score(self, X=None, y=None):
        """Negative cost of the fitted control (higher is better)."""
        check_is_fitted(self, "state_")
        return -float(self.cost_)
