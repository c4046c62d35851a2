"""Run configuration, loaded from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .adrpo import AdrpoConfig
from .gateway import Gateway, GatewayConfig
from .reward import PenaltyParams

ROLES = ("agent", "answer", "judge", "qa_gen", "embed")


@dataclass
class RunConfig:
    gateways: dict[str, GatewayConfig] = field(default_factory=lambda: {r: GatewayConfig() for r in ROLES})
    k_construct: int = 20
    k_answer: int = 10
    k_qa_gen: int = 20
    n_questions: int = 5
    n_rollouts: int = 8
    rollout_temperature: float = 1.0
    core_capacity: int = 5000
    resolve_threshold: float = 0.95
    gate_mode: str = "rollout"
    ell_mode: str = "mean"
    penalties: PenaltyParams = field(default_factory=PenaltyParams)
    adrpo: AdrpoConfig = field(default_factory=AdrpoConfig)
    seed: int = 0
    max_in_flight: int = 8
    work_dir: str = "runs/default"
    prompts_dir: str | None = None
    expert_lengths: str | None = None

    def __post_init__(self):
        for name in ("k_construct", "k_answer", "k_qa_gen", "n_questions", "n_rollouts", "core_capacity", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.gate_mode not in ("rollout", "per_type"):
            raise ValueError("gate_mode must be 'rollout' or 'per_type'")
        if self.ell_mode not in ("mean", "max"):
            raise ValueError("ell_mode must be 'mean' or 'max'")
        missing = set(ROLES) - set(self.gateways)
        for role in missing:
            self.gateways[role] = GatewayConfig()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        gw = d.pop("gateways", {}) or {}
        default_gw = gw.pop("default", {}) if isinstance(gw, dict) else {}
        bad_roles = set(gw) - set(ROLES)
        if bad_roles:
            raise ValueError(f"unknown gateway roles: {sorted(bad_roles)}")
        gateways = {r: GatewayConfig.from_dict({**default_gw, **(gw.get(r) or {})}) for r in ROLES}
        penalties = PenaltyParams.from_dict(d.pop("penalties", {}) or {})
        adrpo = AdrpoConfig(**(d.pop("adrpo", {}) or {}))
        return cls(gateways=gateways, penalties=penalties, adrpo=adrpo, **d)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def with_mock(self) -> "RunConfig":
        """Every role switched to the deterministic mock backend, seeded from ``seed``."""
        gateways = {
            r: dataclasses.replace(g, backend="mock_hash", seed=self.seed) for r, g in self.gateways.items()
        }
        return dataclasses.replace(self, gateways=gateways)

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir)


@dataclass
class Gateways:
    agent: Gateway
    answer: Gateway
    judge: Gateway
    qa_gen: Gateway
    embed: Gateway

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Gateways":
        return cls(**{r: Gateway(cfg.gateways[r]) for r in ROLES})

    @classmethod
    def mock(cls, seed: int = 0) -> "Gateways":
        return cls(**{r: Gateway.mock(seed) for r in ROLES})

    @property
    def embed_fn(self):
        return self.embed.embed
