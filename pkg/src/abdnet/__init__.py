"""Dynamics-grounded actor networks over kinematic trees, with the exact
articulated-body dynamics they are modeled on, and desk-scale training and
evaluation harnesses."""

__version__ = "0.1.0"

from .morphology import KinematicTree, load_tree, parse_native, parse_urdf_subset
from .dynamics import (
    JointState,
    aba_forward_dynamics,
    crba_oracle_dynamics,
    mass_scaled,
    step_semi_implicit,
)
from .envs import Environment, EnvSpec, load_env_spec, rollout_dataset
from .actors import flops_count, load_checkpoint, make_actor, save_checkpoint
from .learn import TrainConfig, eval_retention, ppo_train, regress_dynamics

__all__ = [
    "__version__",
    "KinematicTree", "load_tree", "parse_native", "parse_urdf_subset",
    "JointState", "aba_forward_dynamics", "crba_oracle_dynamics",
    "mass_scaled", "step_semi_implicit",
    "Environment", "EnvSpec", "load_env_spec", "rollout_dataset",
    "flops_count", "load_checkpoint", "make_actor", "save_checkpoint",
    "TrainConfig", "eval_retention", "ppo_train", "regress_dynamics",
]
