"""Reward and cost critic ensembles, Bellman targets and the pessimistic aggregate.

Reward heads ``qrI`` read the shared latent Z; cost heads ``qcI`` read the
world latent Z^w. The cost critic is undiscounted and bootstraps only inside
an episode (masked by the context-boundary flag), so its fixed point is the
remaining episode cost-to-go.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradnet as gn
from .codec import ModelHealthError
from .model import QBarrierModel
from .policy import sample_actions_batch


def _prefix(kind: str, i: int) -> str:
    if kind not in ("cost", "reward"):
        raise ValueError(f"critic kind must be 'cost' or 'reward', got {kind!r}")
    return f"{'qc' if kind == 'cost' else 'qr'}{i}"


def head_values(model: QBarrierModel, kind: str, latent, action_emb, params: gn.ParamStore | None = None) -> np.ndarray:
    """All M heads, shape ``(M,) + batch_shape``."""
    params = model.params if params is None else params
    spec = model.qc_spec if kind == "cost" else model.qr_spec
    x = np.concatenate(_align(np.asarray(latent, dtype=np.float64), np.asarray(action_emb, dtype=np.float64)),
                       axis=-1)
    vals = np.stack([gn.mlp_apply(params, spec, x, _prefix(kind, i))[..., 0] for i in range(model.cfg.n_critics)])
    if not np.all(np.isfinite(vals)):
        raise ModelHealthError(f"non-finite {kind} critic output")
    return vals


def _align(latent: np.ndarray, action_emb: np.ndarray):
    lead = np.broadcast_shapes(latent.shape[:-1], action_emb.shape[:-1])
    return (np.broadcast_to(latent, lead + latent.shape[-1:]), np.broadcast_to(action_emb, lead + action_emb.shape[-1:]))


def q_plus(model: QBarrierModel, z_w, action_emb, params: gn.ParamStore | None = None) -> np.ndarray:
    """Pessimistic cost value: max over the online cost heads."""
    return head_values(model, "cost", z_w, action_emb, params).max(axis=0)


def q_mean(model: QBarrierModel, kind: str, latent, action_emb, params: gn.ParamStore | None = None) -> np.ndarray:
    return head_values(model, kind, latent, action_emb, params).mean(axis=0)


def heads_on_tape(tape: gn.Tape, model: QBarrierModel, kind: str, latent, action_emb, params=None,
                  frozen: bool = False) -> list[gn.Tensor]:
    """Per-head outputs of shape (B,). ``frozen`` binds head weights as constants."""
    params = model.params if params is None else params
    spec = model.qc_spec if kind == "cost" else model.qr_spec
    x = gn.concat([latent, action_emb], axis=-1)
    outs = []
    for i in range(model.cfg.n_critics):
        y, _ = gn.mlp_forward(params, spec, x, _prefix(kind, i), tape=tape, frozen=frozen)
        outs.append(y[..., 0])
    return outs


@dataclass
class BellmanTarget:
    y_cost: np.ndarray
    y_reward: np.ndarray
    next_actions: np.ndarray  # (K_c, B, ...) target-policy samples
    boundary_mask: np.ndarray  # 1 - d_ctx


def make_targets(model: QBarrierModel, z_next, z_w_next, z_p_next, reward, cost, d_ctx, done,
                 rng: np.random.Generator, K_c: int = 1, gamma_r: float = 0.99,
                 aggregate: str = "mean") -> BellmanTarget:
    """Detached Bellman targets from the target policy and target critic heads.

    ``aggregate="mean"`` averages the target cost heads; ``"two_max"`` takes the
    max of two randomly chosen target heads per transition.
    """
    if K_c < 1:
        raise ValueError("K_c must be >= 1")
    tgt = model.target
    B = len(reward)
    vc = np.zeros(B)
    vr = np.zeros(B)
    acts = []
    for _ in range(K_c):
        a = sample_actions_batch(model, z_p_next, rng, params=tgt)
        acts.append(a)
        a_emb = model.embed_action(a)
        hc = head_values(model, "cost", z_w_next, a_emb, tgt)
        if aggregate == "mean":
            vc += hc.mean(axis=0)
        elif aggregate == "two_max":
            pick = np.stack([rng.choice(model.cfg.n_critics, size=2, replace=False) for _ in range(B)])
            vc += np.maximum(hc[pick[:, 0], np.arange(B)], hc[pick[:, 1], np.arange(B)])
        else:
            raise ValueError(f"unknown target aggregate {aggregate!r}")
        vr += head_values(model, "reward", z_next, a_emb, tgt).mean(axis=0)
    vc /= K_c
    vr /= K_c
    mask = 1.0 - np.asarray(d_ctx, dtype=np.float64)
    y_c = np.asarray(cost, dtype=np.float64) + mask * vc
    y_r = np.asarray(reward, dtype=np.float64) + gamma_r * (1.0 - np.asarray(done, dtype=np.float64)) * vr
    return BellmanTarget(y_c, y_r, np.stack(acts), mask)


def critic_loss(tape: gn.Tape, model: QBarrierModel, z_w, z, action_emb, y_cost, y_reward,
                params=None) -> gn.Tensor:
    """(1/M) sum_i mean[(Qc_i - Y^C)^2 + (Qr_i - Y^R)^2]."""
    if len(y_cost) == 0:
        raise ValueError("empty batch")
    qc = heads_on_tape(tape, model, "cost", z_w, action_emb, params)
    qr = heads_on_tape(tape, model, "reward", z, action_emb, params)
    total = None
    for c_i, r_i in zip(qc, qr):
        term = gn.mean(gn.square(c_i - y_cost)) + gn.mean(gn.square(r_i - y_reward))
        total = term if total is None else total + term
    return total * (1.0 / model.cfg.n_critics)
