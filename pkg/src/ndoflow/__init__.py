"""ndoflow: neural ODE training guided by a pre-trained derivative estimator."""

__version__ = "0.1.0"

from . import autodiff, dynamics, funclib, harness, ndo, noderun, odeint, optim  # noqa: F401
from .dynamics import SystemSpec, add_noise, closed_form, make_truth  # noqa: F401
from .funclib import LibraryConfig, SymbolicFunction, sample_function  # noqa: F401
from .harness import ExperimentSpec, load_config, run_ablation, run_experiment  # noqa: F401
from .ndo import (NdoConfig, NdoModel, NdoTrainConfig, estimate,  # noqa: F401
                  estimate_chain, segment_estimate, train_ndo)
from .noderun import (NodeModel, OptimSpec, TrainSpec, evaluate,  # noqa: F401
                      predict, train)
from .odeint import SolverConfig, Trajectory, integrate  # noqa: F401
