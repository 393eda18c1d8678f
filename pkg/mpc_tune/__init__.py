"""
mpc_tune: contextual constrained Bayesian optimization of cabin-climate MPC parameters.

Pipeline: evaluate episodes → fit surrogates → pick next parameters → smooth the policy
"""

from mpc_tune.config import RunConfig, load_config
from mpc_tune.models import Dataset, Policy, TuningConfig
from mpc_tune.pipeline import compare_policies, run_bench, tune, validate_policy, write_oracle
from mpc_tune.smoothing import query, smooth
from mpc_tune.tuner import run

__version__ = "0.1.0"
__all__ = [
    "Dataset",
    "Policy",
    "RunConfig",
    "TuningConfig",
    "compare_policies",
    "load_config",
    "query",
    "run",
    "run_bench",
    "smooth",
    "tune",
    "validate_policy",
    "write_oracle",
]
