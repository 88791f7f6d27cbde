"""Flat run configuration.

Config files are flat JSON objects whose keys are the fields of
:class:`RunConfig`; unknown keys are rejected. ``None`` budget ranges pick the
environment default ([1, 15] for the gridworld, [0, 5] for the velocity toy).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ModelConfig, config_for_task

DEFAULT_BUDGET_RANGE = {"gridworld": (1.0, 15.0), "velocity": (0.0, 5.0)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # environment
    env: str = "gridworld"
    grid_size: int = 5
    n_obstacles: int = 4
    alpha_train: float = -0.5
    alpha_test: float = 0.5
    v_limit: float = 1.5
    # model
    window: int = 20
    d_z: int = 32
    d_m: int = 16
    hidden: int = 64
    n_critics: int = 4
    budget_feature: bool = False
    # critic targets
    K_c: int = 1
    target_aggregate: str = "mean"
    gamma_r: float = 0.99
    tau: float = 0.005
    detach_wm_target: bool = True
    # optimisation
    lr: float = 3e-4
    betas: tuple = (0.9, 0.99)
    clip_grad: float = 1.0
    batch_size: int = 32
    lambda_critic: float = 10.0
    lambda_wm: float = 1.0
    lambda_distill: float = 0.1
    lambda_conj: float = 0.1
    alpha_bc: float = 0.1
    lambda_c_init: float = 0.0
    lr_lambda: float = 0.05
    # schedule
    epochs: int = 100
    steps_per_epoch: int = 300
    batches_per_epoch: int = 100
    train_episodes: int = 4
    buffer_capacity: int = 20_000
    budget_range: tuple | None = None
    train_shield: str = "off"
    seed: int = 0
    # evaluation
    eval_tasks: int = 100
    eval_episodes: int = 10
    shield: str = "soft"
    n_samples: int = 8
    temperature: float = 1.0
    budget_grid: tuple | None = None
    ns_grid: tuple = (4, 8, 16, 32)
    diag_tasks: int = 50
    overlap_eta: float = 0.5
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.env not in DEFAULT_BUDGET_RANGE:
            raise ConfigError(f"env must be one of {sorted(DEFAULT_BUDGET_RANGE)}, got {self.env!r}")
        for name in ("shield", "train_shield"):
            if getattr(self, name) not in ("off", "soft", "hard"):
                raise ConfigError(f"{name} must be off|soft|hard")
        if self.target_aggregate not in ("mean", "two_max"):
            raise ConfigError("target_aggregate must be mean|two_max")
        if self.n_critics < 2:
            raise ConfigError("n_critics must be >= 2")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.K_c < 1 or self.batch_size < 1:
            raise ConfigError("K_c and batch_size must be >= 1")
        if self.lr_lambda < 0:
            raise ConfigError("lr_lambda must be >= 0")

    @property
    def budget_bounds(self) -> tuple[float, float]:
        return tuple(self.budget_range) if self.budget_range is not None else DEFAULT_BUDGET_RANGE[self.env]

    @property
    def budget_points(self) -> tuple[float, ...]:
        if self.budget_grid is not None:
            return tuple(float(b) for b in self.budget_grid)
        lo, hi = self.budget_bounds
        return tuple(float(lo + (hi - lo) * i / 14) for i in range(15))

    def model_config(self) -> ModelConfig:
        return config_for_task(self.env, window=self.window, d_z=self.d_z, d_m=self.d_m, hidden=self.hidden,
                               n_critics=self.n_critics, budget_feature=self.budget_feature)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        return from_dict({**self.to_dict(), **{k: v for k, v in kw.items() if v is not None}})


_TUPLE_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("tuple", "tuple | None")}


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    clean = {k: (tuple(v) if k in _TUPLE_FIELDS and v is not None else v) for k, v in d.items()}
    return RunConfig(**clean)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not allowed ({nested})")
    return from_dict(data)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir) / "resolved_config.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return out

