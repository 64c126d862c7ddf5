"""Run configuration: every training and environment knob in one place.

Configs load from a YAML mapping mirroring the dataclass layout below;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

REWARD_SCHEMES = ("sent", "succ", "combined")


def derive_seed(master: int, label: str) -> int:
    """Stable per-component seed derived from the master seed and a label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63 - 1)


@dataclass
class EnvSection:
    db_seed: int = 1
    db_size: int = 60
    p_drop: float = 0.2
    p_swap: float = 0.025
    patience: int = 3
    max_turns: int = 16
    goal_domains_min: int = 1
    goal_domains_max: int = 2
    goal_constraints_min: int = 1
    goal_constraints_max: int = 3
    goal_requestables_min: int = 1
    goal_requestables_max: int = 2

    def validate(self) -> None:
        if not (0.0 <= self.p_drop <= 1.0 and 0.0 <= self.p_swap <= 1.0):
            raise ValueError("noise probabilities must lie in [0, 1]")
        if self.patience < 1 or self.max_turns < 2:
            raise ValueError("patience >= 1 and max_turns >= 2 required")
        if self.goal_domains_min > self.goal_domains_max:
            raise ValueError("goal domain bounds inverted")


@dataclass
class SLSection:
    lr: float = 3e-3
    epochs: int = 10
    batch_size: int = 32

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid supervised-learning section")


@dataclass
class CriticSection:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 5
    grad_clip: float = 40.0
    d_model: int = 64
    pretrain_steps: int = 200

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid critic section")


@dataclass
class ActorSection:
    lr: float = 1e-4
    batch_size: int = 16
    sample_size: int = 6
    temperature_action: float = 0.5
    temperature_response: float = 0.9
    history_length: int = 5
    epsilon: float = 0.2
    beta: float = 0.02
    kl_ceiling: float = 2.0
    steps_per_iteration: int = 20

    def validate(self) -> None:
        if self.sample_size < 2:
            raise ValueError("sample_size must be >= 2")
        if self.temperature_action <= 0 or self.temperature_response <= 0:
            raise ValueError("temperatures must be positive")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class RLSection:
    reward: str = "combined"
    dialogues: int = 200
    training_interval: int = 10
    buffer_size: int = 50
    gamma_turn: float = 1.0
    gamma_dial: float = 0.99
    lam: float = 0.99
    tau: float = 0.01
    rho: float = 0.1
    eta: float = 0.9
    eval_every: int = 50

    def validate(self) -> None:
        if self.reward not in REWARD_SCHEMES:
            raise ValueError(f"reward must be one of {REWARD_SCHEMES}")
        if self.training_interval < 1 or self.buffer_size < 1:
            raise ValueError("interval and buffer size must be >= 1")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        for name in ("gamma_turn", "gamma_dial", "lam"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ModelSection:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 512
    max_len: int = 768

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class RunConfig:
    seed: int = 0
    corpus_dialogues: int = 700
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    sl: SLSection = field(default_factory=SLSection)
    critic: CriticSection = field(default_factory=CriticSection)
    actor: ActorSection = field(default_factory=ActorSection)
    rl: RLSection = field(default_factory=RLSection)

    def validate(self) -> "RunConfig":
        for section in (self.env, self.sl, self.critic, self.actor, self.rl, self.model):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {
            "env": EnvSection, "model": ModelSection, "sl": SLSection,
            "critic": CriticSection, "actor": ActorSection, "rl": RLSection,
        }
        kwargs: dict = {}
        for key, value in data.items():
            if key in sections:
                cls_ = sections[key]
                known = {f.name for f in dataclasses.fields(cls_)}
                extra = set(value) - known
                if extra:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(extra)}")
                kwargs[key] = cls_(**value)
            elif key in ("seed", "corpus_dialogues"):
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
