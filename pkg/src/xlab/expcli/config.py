"""Experiment configuration: dataclasses with defaults, loadable from TOML."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from ..errors import ConfigError
from ..modelzoo import BackboneSpec
from ..numcore import SgdHyper
from ..thief import KCENTER_SPACES, STRATEGIES

MODE_ALIASES = {
    "probe": "linear_probe",
    "linear_probe": "linear_probe",
    "lp": "linear_probe",
    "finetune": "full_finetune",
    "full_finetune": "full_finetune",
    "fft": "full_finetune",
}


def canonical_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ConfigError(f"unknown training mode {mode!r} (use probe or finetune)") from None


@dataclass
class FamilySettings:
    seed: int = 2024
    input_dim: int = 32
    concepts: int = 96
    scale: float = 1.0


@dataclass
class TaskSettings:
    classes: int = 10
    noise_sigma: float = 1.5
    train_per_class: int = 100
    test_per_class: int = 50


@dataclass
class PoolSettings:
    size: int = 4000
    overlap: float = 0.5
    noise_sigma: float = 1.5


@dataclass
class PretrainSettings:
    noise_sigma: float = 1.5
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_every: int = 30
    batch_size: int = 32


@dataclass
class BackboneSettings:
    widths: list[int]
    pretrain_classes: int
    samples_per_class: int = 100

    def spec(self, name: str, input_dim: int) -> BackboneSpec:
        return BackboneSpec(input_dim, tuple(self.widths), self.pretrain_classes, self.samples_per_class, "tanh", name)


def _default_backbones():
    return {
        "shallow": BackboneSettings([16, 16], 8),
        "mid": BackboneSettings([64, 64], 24),
        "strong": BackboneSettings([256, 256], 64),
    }


@dataclass
class TrainSettings:
    backbones: list[str]
    modes: list[str]
    epochs: int = 100
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 10.0
    decay_every: int = 30
    batch_size: int = 32
    cells: list[str] | None = None  # explicit "spec:mode" list overrides backbones x modes

    def hyper(self) -> SgdHyper:
        return SgdHyper(self.learning_rate, self.momentum, self.weight_decay, self.decay_factor, self.decay_every)

    def grid(self) -> list[tuple[str, str]]:
        if self.cells:
            out = []
            for cell in self.cells:
                name, _, mode = cell.partition(":")
                out.append((name, canonical_mode(mode or "probe")))
            return out
        return [(b, canonical_mode(m)) for b in self.backbones for m in self.modes]


def _victim_defaults():
    return TrainSettings(["shallow", "mid", "strong"], ["probe", "finetune"])


def _thief_defaults():
    return TrainSettings(["shallow", "strong"], ["probe", "finetune"], learning_rate=0.001, decay_every=50)


@dataclass
class AttackSettings:
    strategies: list[str] = field(default_factory=lambda: ["random"])
    budgets: list[int] = field(default_factory=lambda: [500])
    rounds: int = 5
    kcenter_space: str = "probs"
    label_mode: str = "hard"
    transport: str = "in-process"
    same_as_victim: bool = False


@dataclass
class ExperimentConfig:
    name: str = "default"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs/default"
    family: FamilySettings = field(default_factory=FamilySettings)
    task: TaskSettings = field(default_factory=TaskSettings)
    pool: PoolSettings = field(default_factory=PoolSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    backbones: dict[str, BackboneSettings] = field(default_factory=_default_backbones)
    victim: TrainSettings = field(default_factory=_victim_defaults)
    thief: TrainSettings = field(default_factory=_thief_defaults)
    attack: AttackSettings = field(default_factory=AttackSettings)

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for name, mode in self.victim.grid() + self.thief_grid():
            if name not in self.backbones:
                raise ConfigError(f"unknown backbone spec {name!r}")
        for strat in self.attack.strategies:
            if strat not in STRATEGIES:
                raise ConfigError(f"unknown strategy {strat!r}")
        if self.attack.kcenter_space not in KCENTER_SPACES:
            raise ConfigError(f"unknown k-center space {self.attack.kcenter_space!r}")
        if self.attack.label_mode not in ("hard", "soft"):
            raise ConfigError("label_mode must be hard or soft")
        if self.attack.transport not in ("in-process", "http"):
            raise ConfigError("transport must be in-process or http")
        if not self.attack.budgets or min(self.attack.budgets) < 10:
            raise ConfigError("budgets must be non-empty and each at least 10")
        if max(self.attack.budgets) > self.pool.size:
            raise ConfigError("pool is smaller than the largest budget")
        used = {name for name, _ in self.victim.grid() + self.thief_grid()}
        for name in sorted(used):
            if self.backbones[name].pretrain_classes > self.family.concepts:
                raise ConfigError(f"backbone {name!r} pretrains on more concepts than the family has")
        if self.task.classes > self.family.concepts:
            raise ConfigError("victim task has more classes than the family has concepts")
        return self

    def thief_grid(self) -> list[tuple[str, str]]:
        return self.thief.grid()

    def spec(self, name: str) -> BackboneSpec:
        return self.backbones[name].spec(name, self.family.input_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, *parts) -> str:
        """Short stable hash of ``parts`` (dataclasses are hashed by their fields)."""
        plain = [asdict(p) if is_dataclass(p) else p for p in parts]
        blob = json.dumps(plain, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for key, value in changes.items():
            setattr(new, key, value)
        return new


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    base = cls() if cls not in (TrainSettings, BackboneSettings) else None
    kwargs = asdict(base) if base is not None else {}
    kwargs.update(data)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def _merge_train(default: TrainSettings, data: dict, where: str) -> TrainSettings:
    known = {f.name for f in fields(TrainSettings)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    merged = asdict(default)
    merged.update(data)
    return TrainSettings(**merged)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    cfg = ExperimentConfig()
    for key in ("name", "seeds", "out"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    sections = {
        "family": FamilySettings,
        "task": TaskSettings,
        "pool": PoolSettings,
        "pretrain": PretrainSettings,
        "attack": AttackSettings,
    }
    for key, cls in sections.items():
        if key in data:
            setattr(cfg, key, _build(cls, data.pop(key), key))
    if "backbones" in data:
        specs = dict(cfg.backbones)
        for name, body in data.pop("backbones").items():
            specs[name] = _build(BackboneSettings, body, f"backbones.{name}")
        cfg.backbones = specs
    if "victim" in data:
        cfg.victim = _merge_train(cfg.victim, data.pop("victim"), "victim")
    if "thief" in data:
        cfg.thief = _merge_train(cfg.thief, data.pop("thief"), "thief")
    if data:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(data))}")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as TOML (enough of the format for round-tripping our own configs)."""

    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, list):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return str(v)

    def section(title, obj):
        body = asdict(obj) if is_dataclass(obj) else obj
        rows = [f"[{title}]"] + [f"{k} = {scalar(v)}" for k, v in body.items() if v is not None]
        return "\n".join(rows)

    parts = [f"name = {scalar(cfg.name)}", f"seeds = {scalar(cfg.seeds)}", f"out = {scalar(cfg.out)}", ""]
    for title in ("family", "task", "pool", "pretrain"):
        parts += [section(title, getattr(cfg, title)), ""]
    for name, bb in cfg.backbones.items():
        parts += [section(f"backbones.{name}", bb), ""]
    for title in ("victim", "thief", "attack"):
        parts += [section(title, getattr(cfg, title)), ""]
    return "\n".join(parts)
