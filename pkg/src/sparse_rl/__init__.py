"""Static-sparse deep RL: one-shot random pruning over residual actor-critic
networks, SAC/DDPG/streaming training, and optimization-pathology diagnostics."""

from .agents import (
    DDPGAgent,
    HyperParams,
    ReplayBuffer,
    SACAgent,
    StreamACAgent,
    StreamConfig,
    Transition,
    make_agent,
    soft_update,
)
from .diagnostics import (
    ActivationBatch,
    DiagnosticsRecord,
    FeatureMatrix,
    GradCovariance,
    collect_diagnostics,
    dormant_ratio,
    fau,
    grad_covariance,
    grad_norm_active,
    param_norm_active,
    reset_schedule,
    reset_steps,
    srank,
)
from .envs import EnvSpec, env_ids, make_env
from .harness import (
    ExperimentConfig,
    RunLog,
    count_parameters,
    equal_parameter_scaling,
    read_run_csv,
    run_experiment,
    run_sweep,
)
from .networks import (
    MaskedLinear,
    Network,
    NetworkSpec,
    ObsNormalizer,
    actor_spec,
    build_network,
    critic_spec,
    reset_network,
)
from .sparsity import (
    LayerShape,
    Mask,
    SparsityPlan,
    measured_sparsity,
    plan_er,
    plan_uniform,
    sample_mask,
    sparse_init_zeros,
)

__version__ = "0.1.0"
