"""Run configuration shared by the CLI and the experiment runner.

A run file is a flat JSON object; missing keys take the defaults below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .errors import SpecInvalid
from .flow import FlowSchedule
from .fusion import FusionConfig
from .refine import RefineConfig


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 30.0
    beta: float = 30.0
    gamma: float = 0.5
    strategy: str = "combined"
    n_steps: int = 25
    T_s: int = 15
    delta_g: int = 3
    eta: float = 0.1
    lambda_contact: float = 0.5
    contact_band: Optional[float] = None
    normalize_guidance: bool = False
    iters: int = 100
    lr: float = 0.01
    lambda_col: float = 200.0
    lambda_con: float = 50.0
    lambda_reg: float = 1.0
    tau: float = 0.05
    n_samples: int = 4096
    sigma: float = 0.5

    def fusion(self, **overrides) -> FusionConfig:
        base = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, strategy=self.strategy)
        base.update(overrides)
        return FusionConfig(**base)

    def schedule(self) -> FlowSchedule:
        return FlowSchedule(self.n_steps, self.T_s, self.delta_g, self.eta, self.normalize_guidance)

    def refine(self, seed: int = 0) -> RefineConfig:
        return RefineConfig(iterations=self.iters, lr=self.lr, lambda_col=self.lambda_col,
                            lambda_con=self.lambda_con, lambda_reg=self.lambda_reg, tau=self.tau,
                            n_samples=self.n_samples, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecInvalid(f"unknown config keys: {unknown}")
        cfg = replace(cls(), **d)
        # build the component configs once so invalid values fail early
        try:
            cfg.fusion(), cfg.schedule(), cfg.refine()
        except ValueError as e:
            raise SpecInvalid(str(e)) from e
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SpecInvalid(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise SpecInvalid("config must be a JSON object")
        return cls.from_dict(data)
