"""Base policy head on the policy latent Z^p.

Discrete: categorical over ``n_actions`` logits.
Continuous: tanh-squashed diagonal Gaussian, actions in [-1, 1].
"""

from __future__ import annotations

import numpy as np

from . import gradnet as gn
from .model import POLICY_LOG_STD, QBarrierModel

_SQUASH_EPS = 1e-6


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def action_probs(model: QBarrierModel, z_p, params: gn.ParamStore | None = None) -> np.ndarray:
    params = model.params if params is None else params
    return _softmax(gn.mlp_apply(params, model.pi_spec, z_p, "pi"))


def gaussian_params(model: QBarrierModel, z_p, params: gn.ParamStore | None = None):
    params = model.params if params is None else params
    out = gn.mlp_apply(params, model.pi_spec, z_p, "pi")
    k = model.cfg.action_dim
    return out[..., :k], np.clip(out[..., k:], *POLICY_LOG_STD)


def sample_actions(model: QBarrierModel, z_p, rng: np.random.Generator, n: int = 1,
                   params: gn.ParamStore | None = None) -> np.ndarray:
    """``n`` i.i.d. actions for a single latent ``z_p`` (shape ``(n,)`` or ``(n, action_dim)``)."""
    if model.cfg.discrete:
        p = action_probs(model, z_p, params)
        return rng.choice(len(p), size=n, p=p)
    mu, log_std = gaussian_params(model, z_p, params)
    u = mu + np.exp(log_std) * rng.standard_normal((n,) + mu.shape)
    return np.tanh(u)


def sample_actions_batch(model: QBarrierModel, z_p: np.ndarray, rng: np.random.Generator,
                         params: gn.ParamStore | None = None) -> np.ndarray:
    """One action per row of a batch of latents."""
    if model.cfg.discrete:
        p = action_probs(model, z_p, params)
        u = rng.random(len(p))[:, None]
        return np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
    mu, log_std = gaussian_params(model, z_p, params)
    return np.tanh(mu + np.exp(log_std) * rng.standard_normal(mu.shape))


# -- tape versions used by the actor loss ---------------------------------------


def log_probs_on_tape(tape: gn.Tape, model: QBarrierModel, z_p: gn.Tensor, params=None) -> gn.Tensor:
    params = model.params if params is None else params
    logits, _ = gn.mlp_forward(params, model.pi_spec, z_p, "pi", tape=tape)
    return gn.log_softmax(logits, axis=-1)


def gaussian_on_tape(tape: gn.Tape, model: QBarrierModel, z_p: gn.Tensor, params=None):
    params = model.params if params is None else params
    out, _ = gn.mlp_forward(params, model.pi_spec, z_p, "pi", tape=tape)
    k = model.cfg.action_dim
    return out[..., :k], gn.clip(out[..., k:], *POLICY_LOG_STD)


def squashed_log_prob(mu: gn.Tensor, log_std: gn.Tensor, action: np.ndarray) -> gn.Tensor:
    """log density of tanh(N(mu, std)) at ``action``, summed over action dims."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1 + _SQUASH_EPS, 1 - _SQUASH_EPS)
    u = np.arctanh(a)
    zsc = (u - mu) * gn.exp(-log_std)
    lp = -0.5 * gn.square(zsc) - log_std - 0.5 * np.log(2 * np.pi) - np.log(1 - a * a)
    return gn.sum(lp, axis=-1)
