"""History windows, the shared encoder and the two projection heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradnet as gn
from .model import ModelConfig, QBarrierModel, embed_action


class ModelHealthError(FloatingPointError):
    """Non-finite latents, predictions or critic values."""


@dataclass
class ContextWindow:
    """Last ``W`` transitions (oldest first, front-padded) plus the current observation.

    Arrays may carry leading batch dimensions.
    """

    entries: np.ndarray  # (..., W, entry_dim)
    mask: np.ndarray  # (..., W), 1 for real entries
    obs: np.ndarray  # (..., obs_dim)
    extra: np.ndarray | None = None  # (..., extra_dim)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.obs.shape[:-1]


@dataclass
class LatentTriple:
    z: object
    z_w: object
    z_p: object


def embed_entry(cfg: ModelConfig, state, action, reward: float, cost: float, d_ctx: bool) -> np.ndarray:
    return np.concatenate([
        np.asarray(state, dtype=np.float64).reshape(-1),
        embed_action(cfg, action).reshape(-1),
        [reward, cost, float(d_ctx)],
    ])


def window_from_entries(cfg: ModelConfig, entries: np.ndarray, obs, extra=None) -> ContextWindow:
    """Build a window from an (n, entry_dim) array of embedded history rows."""
    W = cfg.window
    entries = np.asarray(entries, dtype=np.float64).reshape(-1, cfg.entry_dim)
    recent = entries[-W:] if len(entries) else entries
    n = len(recent)
    out = np.zeros((W, cfg.entry_dim))
    mask = np.zeros(W)
    if n:
        out[W - n:] = recent
        mask[W - n:] = 1.0
    ext = None
    if cfg.budget_feature:
        ext = np.asarray([0.0] if extra is None else extra, dtype=np.float64).reshape(cfg.extra_dim)
    return ContextWindow(out, mask, np.asarray(obs, dtype=np.float64).reshape(cfg.obs_dim), ext)


def window_from_history(cfg: ModelConfig, history: Sequence, obs, extra=None) -> ContextWindow:
    """Window over a list of :class:`~qbarrier.cmdp.Transition` objects."""
    rows = [embed_entry(cfg, tr.state, tr.action, tr.reward, tr.cost, tr.d_ctx) for tr in history[-cfg.window:]]
    return window_from_entries(cfg, np.array(rows) if rows else np.zeros((0, cfg.entry_dim)), obs, extra)


def stack_windows(windows: Sequence[ContextWindow]) -> ContextWindow:
    extra = None if windows[0].extra is None else np.stack([w.extra for w in windows])
    return ContextWindow(np.stack([w.entries for w in windows]), np.stack([w.mask for w in windows]),
                         np.stack([w.obs for w in windows]), extra)


def encoder_input(cfg: ModelConfig, window: ContextWindow) -> np.ndarray:
    """Flattened encoder features. Masked slots are multiplied out, so their content is irrelevant."""
    if window.entries.shape[-2:] != (cfg.window, cfg.entry_dim):
        raise gn.ConfigurationError(
            f"window entries shape {window.entries.shape[-2:]} != {(cfg.window, cfg.entry_dim)}")
    lead = window.obs.shape[:-1]
    masked = window.entries * window.mask[..., None]
    parts = [masked.reshape(lead + (-1,)), window.mask, window.obs]
    if cfg.budget_feature:
        parts.append(window.extra)
    return np.concatenate(parts, axis=-1)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelHealthError("non-finite latent")


def encode(model: QBarrierModel, window: ContextWindow, params: gn.ParamStore | None = None) -> LatentTriple:
    """Inference-time encoding to numpy latents."""
    params = model.params if params is None else params
    x = encoder_input(model.cfg, window)
    z = gn.mlp_apply(params, model.enc_spec, x, "enc")
    z_w = gn.mlp_apply(params, model.proj_spec, z, "wproj")
    z_p = gn.mlp_apply(params, model.proj_spec, z, "pproj")
    _check_finite(z, z_w, z_p)
    return LatentTriple(z, z_w, z_p)


def encode_on_tape(tape: gn.Tape, model: QBarrierModel, window: ContextWindow,
                   params: gn.ParamStore | None = None, detached: bool = False) -> LatentTriple:
    """Encoding recorded on ``tape``. ``detached`` puts sg(Z) in front of both projections."""
    params = model.params if params is None else params
    x = encoder_input(model.cfg, window)
    z, _ = gn.mlp_forward(params, model.enc_spec, x, "enc", tape=tape)
    zin = gn.stop_gradient(z) if detached else z
    z_w, _ = gn.mlp_forward(params, model.proj_spec, zin, "wproj", tape=tape)
    z_p, _ = gn.mlp_forward(params, model.proj_spec, zin, "pproj", tape=tape)
    _check_finite(z.value, z_w.value, z_p.value)
    return LatentTriple(z, z_w, z_p)


def encode_detached(tape: gn.Tape, model: QBarrierModel, window: ContextWindow,
                    params: gn.ParamStore | None = None) -> LatentTriple:
    return encode_on_tape(tape, model, window, params, detached=True)


def project(model: QBarrierModel, z: np.ndarray, params: gn.ParamStore | None = None) -> tuple[np.ndarray, np.ndarray]:
    params = model.params if params is None else params
    return (gn.mlp_apply(params, model.proj_spec, z, "wproj"), gn.mlp_apply(params, model.proj_spec, z, "pproj"))
