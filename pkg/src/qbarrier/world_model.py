"""Probabilistic one-step latent dynamics on Z^w and the alignment losses.

The ``wm`` network maps ``[z_w, a]`` to ``[mean (d_m), log_std (d_m), r_hat, c_hat]``.
The transition density is a diagonal Gaussian with stddev clamped to [1e-3, 10].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradnet as gn
from .codec import ModelHealthError
from .model import QBarrierModel

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(10.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class LatentPrediction:
    mean: np.ndarray
    log_std: np.ndarray
    reward: np.ndarray
    cost: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def log_density(self, target) -> np.ndarray:
        x = np.asarray(target, dtype=np.float64)
        zsc = (x - self.mean) / self.std
        return np.sum(-self.log_std - HALF_LOG_2PI - 0.5 * zsc * zsc, axis=-1)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = self.mean.shape if n is None else (n,) + self.mean.shape
        return self.mean + self.std * rng.standard_normal(shape)


def predict(model: QBarrierModel, z_w, action_emb, params: gn.ParamStore | None = None) -> LatentPrediction:
    params = model.params if params is None else params
    d = model.cfg.d_m
    x = np.concatenate([np.asarray(z_w, dtype=np.float64), np.asarray(action_emb, dtype=np.float64)], axis=-1)
    out = gn.mlp_apply(params, model.wm_spec, x, "wm")
    if not np.all(np.isfinite(out)):
        raise ModelHealthError("non-finite world-model prediction")
    return LatentPrediction(out[..., :d], np.clip(out[..., d:2 * d], LOG_STD_MIN, LOG_STD_MAX),
                            out[..., 2 * d], out[..., 2 * d + 1])


def f_z(model: QBarrierModel, z_w, action_emb, params: gn.ParamStore | None = None) -> np.ndarray:
    """Predictive mean of the next world latent."""
    return predict(model, z_w, action_emb, params).mean


def predict_on_tape(tape: gn.Tape, model: QBarrierModel, z_w: gn.Tensor, action_emb, params=None):
    params = model.params if params is None else params
    d = model.cfg.d_m
    out, _ = gn.mlp_forward(params, model.wm_spec, gn.concat([z_w, action_emb], axis=-1), "wm", tape=tape)
    mean = out[..., :d]
    log_std = gn.clip(out[..., d:2 * d], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std, out[..., 2 * d], out[..., 2 * d + 1]


def wm_loss(tape: gn.Tape, model: QBarrierModel, z_w: gn.Tensor, action_emb, z_w_next, reward, cost,
            params=None, detach_target: bool = True) -> gn.Tensor:
    """mean NLL of the next latent + mean squared reward error + mean squared cost error.

    ``z_w_next`` is wrapped in a stop-gradient unless ``detach_target`` is False.
    """
    if np.asarray(z_w.value).shape[0] == 0:
        raise ValueError("empty batch")
    mean, log_std, r_hat, c_hat = predict_on_tape(tape, model, z_w, action_emb, params)
    target = z_w_next
    if isinstance(target, gn.Tensor) and detach_target:
        target = gn.stop_gradient(target)
    zsc = (target - mean) * gn.exp(-log_std)
    nll = gn.sum(log_std + HALF_LOG_2PI + 0.5 * gn.square(zsc), axis=-1)
    return gn.mean(nll) + gn.mean(gn.square(r_hat - reward)) + gn.mean(gn.square(c_hat - cost))


def distill_loss(tape: gn.Tape, model: QBarrierModel, z: gn.Tensor, params=None) -> gn.Tensor:
    """|| g_policy(sg(Z)) - sg(g_world(Z)) ||^2, averaged over the batch."""
    params = model.params if params is None else params
    zs = gn.stop_gradient(z)
    p, _ = gn.mlp_forward(params, model.proj_spec, zs, "pproj", tape=tape)
    w, _ = gn.mlp_forward(params, model.proj_spec, zs, "wproj", tape=tape)
    return gn.mean(gn.sum(gn.square(p - gn.stop_gradient(w)), axis=-1))


def conjugacy_loss(tape: gn.Tape, model: QBarrierModel, z_t: gn.Tensor, z_t1: gn.Tensor, params=None) -> gn.Tensor:
    """|| (g_p(sg Z') - g_p(sg Z)) - sg(g_w(Z') - g_w(Z)) ||^2, averaged over the batch."""
    params = model.params if params is None else params
    a, b = gn.stop_gradient(z_t), gn.stop_gradient(z_t1)
    p0, _ = gn.mlp_forward(params, model.proj_spec, a, "pproj", tape=tape)
    p1, _ = gn.mlp_forward(params, model.proj_spec, b, "pproj", tape=tape)
    w0, _ = gn.mlp_forward(params, model.proj_spec, a, "wproj", tape=tape)
    w1, _ = gn.mlp_forward(params, model.proj_spec, b, "wproj", tape=tape)
    return gn.mean(gn.sum(gn.square((p1 - p0) - gn.stop_gradient(w1 - w0)), axis=-1))
