"""Desk-scale lab for cross-modal transferable adversarial attacks on a
simulated multimodal retrieval-augmented generation pipeline."""

from .attack import AttackConfig, TargetSpec, dual_loop_attack, mpil_loss, run_attack
from .campaign import CampaignConfig, run_campaign
from .defenses import DefenseConfig, apply_defense
from .errors import ConfigError, ContractError, LabError, StageError

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "CampaignConfig",
    "ConfigError",
    "ContractError",
    "DefenseConfig",
    "LabError",
    "StageError",
    "TargetSpec",
    "apply_defense",
    "dual_loop_attack",
    "mpil_loss",
    "run_attack",
    "run_campaign",
]
