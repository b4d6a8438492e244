"""Frequency-control laboratory for power grids with switching inertia.

Simulates nonlinear swing dynamics whose inertia jumps between modes,
trains monotone proportional-integral controllers by backpropagation
through the unrolled rollout, selects among pre-trained controllers
online with an event-triggered bandit, and numerically certifies
exponential input-to-state decay.
"""

from .controllers import (ControllerPool, LinearDroopController, LinearPIController,
                          MLPPIController, MonotoneNNController, MonotonePIController,
                          MonotoneStack, eval_monotone, load_controller, save_controller)
from .dynamics import (FixedPolicy, GridState, Trajectory, electrical_power,
                       export_trajectory, integral_step, read_trajectory, simulate, step)
from .errors import (CertificationError, EquilibriumError, GridSwitchError,
                     IntegrationError, ModelError, PoolError, ScenarioError)
from .grid import (DisturbanceProfile, GridModel, InertiaSchedule, constant_schedule,
                   incidence_matrix, random_step_profile, sample_inertia_schedule,
                   weighted_laplacian)
from .harness import (EvalMetrics, ExperimentSpec, eval_cross_mode, eval_switching,
                      run_switching_experiment, sweep_hyperparams)
from .scenario import Scenario, load_case, load_scenario, parse_scenario, save_scenario
from .stability import (DwellStats, Equilibrium, IssCertificate, compute_certificate,
                        dwell_time_stats, load_certificate, lyapunov_value,
                        save_certificate, solve_equilibrium, verify_envelope)
from .switching import (KnownSwitchingPolicy, OnlineSwitcher, OnlineSwitchingPolicy,
                        SwitchConfig, SwitcherState, bandit_update, batch_cost,
                        event_trigger, step_cost)
from .training import (Adam, RolloutCase, TrainConfig, TrainReport,
                       finite_difference_gradient, gradient, rollout_loss,
                       sample_cases, train)

__version__ = "0.1.0"
