"""Shared test utilities: tiny models, float64 parameter stores, finite differences."""

import numpy as np

from qbarrier import gradnet as gn
from qbarrier.codec import ContextWindow
from qbarrier.model import ModelConfig, QBarrierModel, config_for_task


class F64Store(gn.ParamStore):
    """ParamStore that keeps float64 so central differences are not swamped by rounding."""

    def __setitem__(self, name, value):
        self._arrays[name] = np.array(value, dtype=np.float64)


def tiny_config(kind="gridworld", **kw) -> ModelConfig:
    base = dict(window=2, d_z=4, d_m=3, hidden=5, n_critics=2)
    base.update(kw)
    return config_for_task(kind, **base)


def tiny_model(kind="gridworld", seed=0, f64=True, **kw) -> QBarrierModel:
    m = QBarrierModel.init(tiny_config(kind, **kw), seed=seed)
    if f64:
        m.params = F64Store({k: v for k, v in m.params.items()})
        m.target = F64Store({k: v for k, v in m.target.items()})
    return m


def random_window(cfg: ModelConfig, batch: int, rng) -> ContextWindow:
    entries = rng.normal(size=(batch, cfg.window, cfg.entry_dim))
    mask = (rng.random((batch, cfg.window)) < 0.7).astype(float)
    obs = rng.normal(size=(batch, cfg.obs_dim))
    extra = rng.random((batch, cfg.extra_dim)) if cfg.budget_feature else None
    return ContextWindow(entries, mask, obs, extra)


def fd_gradient(loss_fn, store, names, eps=1e-6) -> dict:
    """Central differences of the scalar ``loss_fn()`` w.r.t. ``store[name]`` entries."""
    out = {}
    for name in names:
        base = np.array(store[name], dtype=np.float64)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                pert = base.copy()
                pert[idx] += sign * eps
                store[name] = pert
                g[idx] += sign * loss_fn()
            g[idx] /= 2 * eps
        store[name] = base
        out[name] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    a = np.concatenate([np.ravel(analytic[k]) for k in numeric])
    b = np.concatenate([np.ravel(numeric[k]) for k in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def names_with(store, *prefixes):
    return [n for n in store.names() if n.startswith(tuple(p + "." for p in prefixes))]


ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log one acceptance line (printed in the terminal summary) and fail the test if ``ok`` is false."""
    ok = bool(ok)
    ACCEPTANCE_RESULTS.append((criterion, ok, detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, f"criterion {criterion}: {detail}"
