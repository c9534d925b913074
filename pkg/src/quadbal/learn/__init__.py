"""PPO with online adaptation of the history estimators, plus the curriculum scheduler."""
from .agent import BalanceAgent
from .config import (AblationFlags, ConfigError, CurriculumConfig, NetConfig, PpoConfig, RoaConfig, TrainConfig,
                     dump_config, load_config, parse_config)
from .ppo import (CurriculumState, RolloutBuffer, TrainingDivergence, compute_gae, curriculum_tick, ppo_loss,
                  ppo_update, roa_losses, roa_update)
from .toy import ToyAgent, ToyVelocityEnv, train_toy
from .train import METRIC_COLUMNS, Outcome, Trainer, collect_rollouts, load_policy, train

__all__ = [
    "AblationFlags", "BalanceAgent", "ConfigError", "CurriculumConfig", "CurriculumState", "METRIC_COLUMNS",
    "NetConfig", "Outcome", "PpoConfig", "RoaConfig", "RolloutBuffer", "ToyAgent", "ToyVelocityEnv",
    "TrainConfig", "Trainer", "TrainingDivergence", "collect_rollouts", "compute_gae", "curriculum_tick",
    "dump_config", "load_config", "load_policy", "parse_config", "ppo_loss", "ppo_update", "roa_losses",
    "roa_update", "train", "train_toy",
]
