"""Gradient-flow training of two-layer ReLU networks and the data-adaptive
kernels it induces."""

from .dynamics import (Dataset, DivergenceError, FlowConfig, FlowResult, GuardBandError,
                       LogCoshLoss, ResidualView, SquaredLoss, TrajectoryLog,
                       check_residual_ode, default_step, euler_step, grad, objective,
                       residual, run_flow)
from .experiments import (CsvParseError, ExperimentSpec, SpectrumSeries, gen_random_labels,
                          gen_teacher, load_csv, run_spectrum_experiment, write_experiment)
from .kernels import (GramMatrix, MlpState, gd_kernel, gram, h_kernel, k0_closed_form,
                      k0_monte_carlo, mlp_kernel, numerical_rank, psd_chain_check)
from .model import (BalanceError, ConfigError, InitSpec, NetworkState, SignedAtomMeasure,
                    balance_gap, forward, init_network, to_signed_measure)
from .spectral import (RidgeSolution, Spectrum, check_nn_equals_ridgeless,
                       check_projection_optimality, eig_sym, pinv_apply, ridge_solve)

__version__ = "0.1.0"
