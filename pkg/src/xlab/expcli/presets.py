"""Built-in experiment configurations (mirrored by the TOML files under ``configs/``)."""

from __future__ import annotations

from .config import ExperimentConfig

SWEEP_BUDGETS = [100, 250, 500, 1000]


def default_config() -> ExperimentConfig:
    """Victims {shallow, mid, strong} x {probe, finetune}; thieves {shallow, strong} x {probe, finetune}; budget 500."""
    return ExperimentConfig().validate()


def sweep_config() -> ExperimentConfig:
    """Budget ablation: strong and shallow probe victims, strong probe thief."""
    cfg = ExperimentConfig(name="budget-sweep", out="runs/sweep")
    cfg.victim.cells = ["strong:probe", "shallow:probe"]
    cfg.thief.cells = ["strong:probe"]
    cfg.attack.budgets = list(SWEEP_BUDGETS)
    return cfg.validate()


def same_arch_config() -> ExperimentConfig:
    """Thief backbone equals the victim backbone."""
    cfg = ExperimentConfig(name="same-arch", out="runs/same-arch")
    cfg.attack.same_as_victim = True
    return cfg.validate()
