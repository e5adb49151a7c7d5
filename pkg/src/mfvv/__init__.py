"""Particle solvers for viscous mean-field optimal control and the
vanishing-viscosity limit."""

from .estimator import ViscousControlSolver
from .exceptions import (BlowUp, CflViolation, ConfigError, DimensionMismatch, GridMismatch,
                         MassLoss, MfvvError, NoConvergence, NonFiniteEvaluation, RejectedSpec,
                         SizeLimit, UnknownScenario, WitnessNotLipschitz)
from .fbsde import (DecouplingField, FbsdeState, RegressionConfig, backward_pass,
                    extract_decoupling_field, feedback_control, picard_step, solve_fbsde)
from .forward import (ForwardPaths, GridDensity, TimeGrid, pde_oracle_1d, simulate_forward)
from .hamiltonian import MinimizerConfig, minimize_hamiltonian, verify_minimizer_lipschitz
from .lab import (CounterexampleReport, SweepReport, evaluate_cost, run_counterexample,
                  run_sweep)
from .measures import (ParticleEnsemble, TransportPlan, dirac, kantorovich_w1_lower_bound,
                       optimal_plan, read_snapshot, sup_wasserstein_path, wasserstein,
                       wasserstein_path, write_snapshot)
from .problem import (SCENARIOS, ControlSet, InitialMeasure, ProblemSpec, ValidationReport,
                      admissibility_gap, builtin_scenario, closed_form_constants, constants,
                      lambda_threshold, lq_spec, validate_spec)

__version__ = "0.1.0"
