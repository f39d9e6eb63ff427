"""Periodic and compressed decentralized momentum SGD on simulated worker graphs."""

from .compression import CompressorSpec, compress, verify_contraction
from .config import ConfigError, RunConfig, load_config
from .diagnostics import (
    MetricsRecord,
    RunMonitor,
    check_aux_z,
    consensus_bound,
    consensus_distance,
    time_to_threshold,
)
from .estimators import DecentralizedSGDClassifier, DecentralizedSGDRegressor
from .optim import (
    Engine,
    OptimizerConfig,
    WorkerState,
    default_gamma,
    gossip_compressed,
    gossip_exact,
    local_step,
)
from .problems import (
    GradientSample,
    Problem,
    estimate_constants,
    full_gradient,
    make_problem,
    stochastic_gradient,
)
from .runner import execute, run, sweep
from .topology import MixingMatrix, build_topology, spectral_gap, validate_doubly_stochastic

__version__ = "0.1.0"

__all__ = [
    "CompressorSpec",
    "ConfigError",
    "DecentralizedSGDClassifier",
    "DecentralizedSGDRegressor",
    "Engine",
    "GradientSample",
    "MetricsRecord",
    "MixingMatrix",
    "OptimizerConfig",
    "Problem",
    "RunConfig",
    "RunMonitor",
    "WorkerState",
    "build_topology",
    "check_aux_z",
    "compress",
    "consensus_bound",
    "consensus_distance",
    "default_gamma",
    "estimate_constants",
    "execute",
    "full_gradient",
    "gossip_compressed",
    "gossip_exact",
    "load_config",
    "local_step",
    "make_problem",
    "run",
    "spectral_gap",
    "stochastic_gradient",
    "sweep",
    "time_to_threshold",
    "validate_doubly_stochastic",
    "verify_contraction",
]
