"""Network layout shared by every learned component.

One online :class:`ParamStore` holds all trainable groups under fixed prefixes:

=========  ==========================================================
``enc``    history encoder, window -> shared latent Z (d_z)
``wproj``  world projection Z -> Z^w (d_m)
``pproj``  policy projection Z -> Z^p (d_m)
``wm``     latent dynamics + reward/cost heads on (Z^w, a)
``pi``     base policy on Z^p
``qrI``    reward critic head I on (Z, a)
``qcI``    cost critic head I on (Z^w, a)
=========  ==========================================================

The target store mirrors ``pi`` and the critic heads for Polyak averaging.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .gradnet import LayerSpec, ParamStore, init_mlp

POLICY_LOG_STD = (-5.0, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    discrete: bool = True
    obs_dim: int = 2
    n_actions: int = 5  # discrete action count; ignored for continuous
    action_dim: int = 1  # continuous action width; ignored for discrete
    window: int = 20
    d_z: int = 32
    d_m: int = 16
    hidden: int = 64
    n_critics: int = 4
    budget_feature: bool = False

    @property
    def a_emb(self) -> int:
        return self.n_actions if self.discrete else self.action_dim

    @property
    def entry_dim(self) -> int:
        # [state, action, reward, cost, d_ctx]
        return self.obs_dim + self.a_emb + 3

    @property
    def extra_dim(self) -> int:
        return 1 if self.budget_feature else 0

    @property
    def encoder_in(self) -> int:
        return self.window * self.entry_dim + self.window + self.obs_dim + self.extra_dim

    def to_dict(self) -> dict:
        return asdict(self)


class QBarrierModel:
    """Layer specs plus the online and target parameter stores."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, target: ParamStore):
        self.cfg = cfg
        self.params = params
        self.target = target

    # -- layer specs ---------------------------------------------------------
    @property
    def enc_spec(self) -> LayerSpec:
        c = self.cfg
        return LayerSpec((c.encoder_in, c.hidden, c.d_z), "tanh", "tanh")

    @property
    def proj_spec(self) -> LayerSpec:
        return LayerSpec((self.cfg.d_z, self.cfg.d_m), "tanh", "tanh")

    @property
    def wm_spec(self) -> LayerSpec:
        c = self.cfg
        return LayerSpec((c.d_m + c.a_emb, c.hidden, 2 * c.d_m + 2), "tanh", None)

    @property
    def pi_spec(self) -> LayerSpec:
        c = self.cfg
        out = c.n_actions if c.discrete else 2 * c.action_dim
        return LayerSpec((c.d_m, c.hidden, out), "tanh", None)

    @property
    def qr_spec(self) -> LayerSpec:
        c = self.cfg
        return LayerSpec((c.d_z + c.a_emb, c.hidden, 1), "tanh", None)

    @property
    def qc_spec(self) -> LayerSpec:
        c = self.cfg
        return LayerSpec((c.d_m + c.a_emb, c.hidden, 1), "tanh", None)

    def target_prefixes(self) -> tuple[str, ...]:
        return ("pi.",) + tuple(f"qr{i}." for i in range(self.cfg.n_critics)) + tuple(
            f"qc{i}." for i in range(self.cfg.n_critics)
        )

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "QBarrierModel":
        if cfg.n_critics < 2:
            raise ValueError("the cost-critic ensemble needs at least 2 heads")
        rng = np.random.default_rng(seed)
        params = ParamStore()
        m = cls(cfg, params, ParamStore())
        init_mlp(params, m.enc_spec, "enc", rng)
        init_mlp(params, m.proj_spec, "wproj", rng)
        init_mlp(params, m.proj_spec, "pproj", rng)
        init_mlp(params, m.wm_spec, "wm", rng)
        init_mlp(params, m.pi_spec, "pi", rng)
        for i in range(cfg.n_critics):
            init_mlp(params, m.qr_spec, f"qr{i}", rng)
        for i in range(cfg.n_critics):
            init_mlp(params, m.qc_spec, f"qc{i}", rng)
        m.target = params.subset(m.target_prefixes())
        return m

    def embed_action(self, action) -> np.ndarray:
        return embed_action(self.cfg, action)


def embed_action(cfg: ModelConfig, action) -> np.ndarray:
    """One-hot for discrete actions (any batch shape), raw value for continuous."""
    if cfg.discrete:
        a = np.asarray(action, dtype=np.int64)
        return np.eye(cfg.n_actions)[a]
    a = np.asarray(action, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    return a.reshape(a.shape[:-1] + (cfg.action_dim,)) if a.shape[-1:] == (cfg.action_dim,) else a[..., None]


def config_for_task(kind: str, **overrides) -> ModelConfig:
    if kind == "gridworld":
        base = dict(discrete=True, obs_dim=2, n_actions=5)
    elif kind == "velocity":
        base = dict(discrete=False, obs_dim=1, action_dim=1)
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    base.update(overrides)
    return ModelConfig(**base)
