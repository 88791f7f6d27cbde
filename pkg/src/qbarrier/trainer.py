"""Joint training of encoder, projections, world model, policy and critic ensembles.

Each epoch is one collection phase (base-policy rollouts on training tasks
with budgets drawn from the configured range) followed by
``batches_per_epoch`` gradient updates on

    L_total = L_actor + 10 L_critic + 1 L_wm + 0.1 L_distill + 0.1 L_conj

and a Polyak update of the target policy and critics after every batch.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import gradnet as gn
from .cmdp import ContextLog, quantize_cost, run_context, sample_task
from .codec import ContextWindow, LatentTriple, embed_entry, encode, encode_on_tape
from .config import RunConfig, from_dict
from .critics import head_values, heads_on_tape, make_targets, critic_loss
from .model import ModelConfig, QBarrierModel, embed_action
from .policy import gaussian_on_tape, log_probs_on_tape, squashed_log_prob
from .rollout import Agent
from .world_model import conjugacy_loss, distill_loss, wm_loss

log = logging.getLogger(__name__)

AWBC_CLIP = 20.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Replay buffer


class ReplayBuffer:
    """Whole contexts, evicted oldest-first once the transition count exceeds ``capacity``."""

    def __init__(self, cfg: ModelConfig, capacity: int = 20_000):
        self.cfg = cfg
        self.capacity = capacity
        self.contexts: deque[dict] = deque()
        self.size = 0
        self._next_id = 0

    def add(self, log: ContextLog, budget_scale: float = 1.0) -> None:
        trs = log.transitions()
        if not trs:
            return
        cfg = self.cfg
        ctx = {
            "id": self._next_id,
            "entries": np.array([embed_entry(cfg, t.state, t.action, t.reward, t.cost, t.d_ctx) for t in trs]),
            "obs": np.array([t.state for t in trs], dtype=np.float64),
            "next_obs": np.array([t.next_state for t in trs], dtype=np.float64),
            "action": np.array([t.action for t in trs]),
            "a_emb": embed_action(cfg, np.array([t.action for t in trs])),
            "reward": np.array([t.reward for t in trs]),
            "cost": np.array([t.cost for t in trs]),
            "d_ctx": np.array([t.d_ctx for t in trs], dtype=np.float64),
            "done": np.array([t.done for t in trs], dtype=np.float64),
            "extra": np.array([log.delta / budget_scale]),
        }
        self._next_id += 1
        self.contexts.append(ctx)
        self.size += len(trs)
        while self.size > self.capacity and len(self.contexts) > 1:
            self.size -= len(self.contexts.popleft()["reward"])

    def __len__(self) -> int:
        return self.size

    def _window(self, ctx: dict, i: int, obs) -> ContextWindow:
        W, cfg = self.cfg.window, self.cfg
        lo = max(0, i - W)
        rows = ctx["entries"][lo:i]
        entries = np.zeros((W, cfg.entry_dim))
        mask = np.zeros(W)
        if len(rows):
            entries[W - len(rows):] = rows
            mask[W - len(rows):] = 1.0
        return ContextWindow(entries, mask, obs, ctx["extra"] if cfg.budget_feature else None)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Aligned (window_t, window_{t+1}) pairs from uniformly drawn transitions."""
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        lengths = np.array([len(c["reward"]) for c in self.contexts])
        flat = rng.integers(0, lengths.sum(), size=batch_size)
        bounds = np.cumsum(lengths)
        ci = np.searchsorted(bounds, flat, side="right")
        ti = flat - np.concatenate([[0], bounds[:-1]])[ci]
        w0, w1, cols = [], [], {k: [] for k in ("a_emb", "action", "reward", "cost", "d_ctx", "done")}
        ctxs = list(self.contexts)
        for c, i in zip(ci, ti):
            ctx = ctxs[c]
            w0.append(self._window(ctx, i, ctx["obs"][i]))
            w1.append(self._window(ctx, i + 1, ctx["next_obs"][i]))
            for k in cols:
                cols[k].append(ctx[k][i])
        batch = {k: np.array(v) for k, v in cols.items()}
        batch["window"] = _stack(w0)
        batch["next_window"] = _stack(w1)
        batch["context_id"] = np.array([ctxs[c]["id"] for c in ci])
        batch["t"] = ti
        return batch


def _stack(ws) -> ContextWindow:
    extra = None if ws[0].extra is None else np.stack([w.extra for w in ws])
    return ContextWindow(np.stack([w.entries for w in ws]), np.stack([w.mask for w in ws]),
                         np.stack([w.obs for w in ws]), extra)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossReport:
    actor: float
    critic: float
    wm: float
    distill: float
    conj: float
    total: float
    lagrange_penalty: float
    grad_norm: float
    lambda_c: float = 0.0

    def recomputed_total(self, cfg: RunConfig) -> float:
        return (self.actor + cfg.lambda_critic * self.critic + cfg.lambda_wm * self.wm
                + cfg.lambda_distill * self.distill + cfg.lambda_conj * self.conj)


def policy_improvement(probs, q_r):
    """-E_{a~pi}[Q_R(z, a)] averaged over the batch; ``q_r`` is a constant (B, n_actions) array."""
    return -gn.mean(gn.sum(probs * q_r, axis=-1))


def awbc_weights(q_logged: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """exp(advantage) clipped to [0, AWBC_CLIP]; treated as constants by the loss."""
    return np.clip(np.exp(np.minimum(q_logged - baseline, math.log(AWBC_CLIP) + 1.0)), 0.0, AWBC_CLIP)


def actor_loss(tape: gn.Tape, model: QBarrierModel, z_p: gn.Tensor, z: np.ndarray, z_w: np.ndarray,
               actions, rng: np.random.Generator, lambda_c: float = 0.0, alpha_bc: float = 0.1,
               bc_weights: np.ndarray | None = None) -> tuple[gn.Tensor, float]:
    """Policy improvement + advantage-weighted BC + Lagrangian cost penalty.

    Critic weights enter as constants, so no gradient reaches any critic head.
    ``bc_weights`` overrides the computed advantage weights (used to hold them
    fixed in gradient checks). Returns ``(loss, lambda_c * cost_penalty_value)``.
    """
    B = len(actions)
    if B == 0:
        raise ValueError("empty batch")
    if model.cfg.discrete:
        n = model.cfg.n_actions
        emb = np.eye(n)
        z_rep = np.repeat(z[:, None, :], n, axis=1)
        zw_rep = np.repeat(z_w[:, None, :], n, axis=1)
        a_rep = np.broadcast_to(emb, (B, n, n))
        q_r = head_values(model, "reward", z_rep, a_rep).mean(axis=0)  # (B, n)
        q_c = head_values(model, "cost", zw_rep, a_rep).max(axis=0)
        logp = log_probs_on_tape(tape, model, z_p)
        probs = gn.exp(logp)
        improve = policy_improvement(probs, q_r)
        a = np.asarray(actions, dtype=np.int64)
        if bc_weights is None:
            bc_weights = awbc_weights(q_r[np.arange(B), a], np.sum(probs.value * q_r, axis=-1))
        awbc = -gn.mean(logp[np.arange(B), a] * bc_weights)
        penalty = gn.mean(gn.sum(probs * q_c, axis=-1))
    else:
        mu, log_std = gaussian_on_tape(tape, model, z_p)
        eps = rng.standard_normal(mu.shape)
        act = gn.tanh(mu + gn.exp(log_std) * eps)
        zc, zwc = tape.constant(z), tape.constant(z_w)
        q_r_heads = heads_on_tape(tape, model, "reward", zc, act, frozen=True)
        q_c_heads = heads_on_tape(tape, model, "cost", zwc, act, frozen=True)
        q_r = q_r_heads[0]
        for h in q_r_heads[1:]:
            q_r = q_r + h
        q_r = q_r * (1.0 / len(q_r_heads))
        q_c = gn.max(gn.stack(q_c_heads, axis=0), axis=0)
        improve = -gn.mean(q_r)
        a_log = np.asarray(actions, dtype=np.float64).reshape(B, model.cfg.action_dim)
        if bc_weights is None:
            bc_weights = awbc_weights(head_values(model, "reward", z, a_log).mean(axis=0), q_r.value)
        awbc = -gn.mean(squashed_log_prob(mu, log_std, a_log) * bc_weights)
        penalty = gn.mean(q_c)
    loss = improve + alpha_bc * awbc + lambda_c * penalty
    return loss, float(lambda_c * penalty.value)


def lagrange_update(lambda_c: float, avg_episode_cost: float, delta: float, lr_lambda: float) -> float:
    """Projected dual ascent: lambda <- [lambda + lr * (cost - delta)]_+."""
    if lr_lambda < 0:
        raise ValueError("lr_lambda must be >= 0")
    return max(0.0, lambda_c + lr_lambda * (avg_episode_cost - delta))


def total_loss(tape: gn.Tape, model: QBarrierModel, batch: dict, cfg: RunConfig, lambda_c: float,
               rng: np.random.Generator) -> tuple[gn.Tensor, dict]:
    lat: LatentTriple = encode_on_tape(tape, model, batch["window"])
    nxt = encode(model, batch["next_window"])
    a_emb = batch["a_emb"]
    tg = make_targets(model, nxt.z, nxt.z_w, nxt.z_p, batch["reward"], batch["cost"], batch["d_ctx"],
                      batch["done"], rng, K_c=cfg.K_c, gamma_r=cfg.gamma_r, aggregate=cfg.target_aggregate)
    l_critic = critic_loss(tape, model, lat.z_w, lat.z, a_emb, tg.y_cost, tg.y_reward)
    l_actor, penalty = actor_loss(tape, model, lat.z_p, lat.z.value, lat.z_w.value, batch["action"], rng,
                                  lambda_c, cfg.alpha_bc)
    target = nxt.z_w if cfg.detach_wm_target else encode_on_tape(tape, model, batch["next_window"]).z_w
    l_wm = wm_loss(tape, model, lat.z_w, a_emb, target, batch["reward"], batch["cost"])
    l_dist = distill_loss(tape, model, lat.z)
    l_conj = conjugacy_loss(tape, model, lat.z, tape.constant(nxt.z))
    total = (l_actor + cfg.lambda_critic * l_critic + cfg.lambda_wm * l_wm
             + cfg.lambda_distill * l_dist + cfg.lambda_conj * l_conj)
    parts = {"actor": l_actor, "critic": l_critic, "wm": l_wm, "distill": l_dist, "conj": l_conj,
             "penalty": penalty}
    return total, parts


# ---------------------------------------------------------------------------
# Training loop


class Trainer:
    """Owns the model, optimizer, dual variable, replay buffer and RNG streams."""

    def __init__(self, cfg: RunConfig, model: QBarrierModel | None = None):
        self.cfg = cfg
        self.model = model if model is not None else QBarrierModel.init(cfg.model_config(), seed=cfg.seed)
        self.opt = gn.Adam(lr=cfg.lr, betas=tuple(cfg.betas))
        self.lambda_c = cfg.lambda_c_init
        self.epoch = 0
        self.buffer = ReplayBuffer(self.model.cfg, cfg.buffer_capacity)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.history: list[dict] = []

    @property
    def budget_scale(self) -> float:
        return max(self.cfg.budget_bounds[1], 1e-9)

    def collect(self, n_steps: int) -> list[ContextLog]:
        cfg = self.cfg
        logs = []
        steps = 0
        lo, hi = cfg.budget_bounds
        while steps < n_steps:
            task = sample_task(cfg.env, cfg.alpha_train, cfg.grid_size, cfg.n_obstacles,
                               seed=int(self.rng.integers(2**31)), v_limit=cfg.v_limit)
            delta = quantize_cost(float(self.rng.uniform(lo, hi)))
            mode = "base" if cfg.train_shield == "off" else cfg.train_shield
            agent = Agent(self.model, mode, cfg.n_samples, cfg.temperature, delta, self.budget_scale)
            ctx = run_context(agent, task, cfg.train_episodes, None, delta, self.rng, context_id=len(logs))
            self.buffer.add(ctx, self.budget_scale)
            logs.append(ctx)
            steps += len(ctx.transitions())
        return logs

    def update(self, batch: dict) -> LossReport:
        cfg = self.cfg
        tape = gn.Tape()
        total, parts = total_loss(tape, self.model, batch, cfg, self.lambda_c, self.rng)
        value = float(total.value)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        grads = gn.backward(tape, total, params=self.model.params)
        norm = gn.clip_grad_norm(grads, cfg.clip_grad)
        self.opt.step(self.model.params, grads)
        gn.polyak_update(self.model.target, self.model.params, cfg.tau)
        return LossReport(
            actor=float(parts["actor"].value), critic=float(parts["critic"].value), wm=float(parts["wm"].value),
            distill=float(parts["distill"].value), conj=float(parts["conj"].value), total=value,
            lagrange_penalty=parts["penalty"], grad_norm=norm, lambda_c=self.lambda_c,
        )

    def train_epoch(self, healthy_dir: Path | None = None) -> list[LossReport]:
        cfg = self.cfg
        logs = self.collect(cfg.steps_per_epoch)
        reports = []
        for _ in range(cfg.batches_per_epoch):
            batch = self.buffer.sample(cfg.batch_size, self.rng)
            try:
                reports.append(self.update(batch))
            except (FloatingPointError, gn.NonFiniteGradientError) as exc:
                raise TrainingDiverged(f"epoch {self.epoch}: {exc}", healthy_dir) from exc
        ep_costs = [c for lg in logs for c in lg.episode_costs()]
        ep_deltas = [lg.delta for lg in logs for _ in lg.episodes]
        ep_returns = [r for lg in logs for r in lg.episode_returns()]
        avg_cost, avg_delta = float(np.mean(ep_costs)), float(np.mean(ep_deltas))
        self.lambda_c = lagrange_update(self.lambda_c, avg_cost, avg_delta, cfg.lr_lambda)
        self.epoch += 1
        row = {"epoch": self.epoch, **_mean_report(reports), "lambda_c": self.lambda_c,
               "train_return": float(np.mean(ep_returns)), "train_cost": avg_cost, "train_delta": avg_delta}
        self.history.append(row)
        log.info("epoch %d total %.4f critic %.4f cost %.3f lambda %.3f", self.epoch, row.get("total", float("nan")),
                 row.get("critic", float("nan")), avg_cost, self.lambda_c)
        return reports

    def train(self, epochs: int | None = None, checkpoint_dir: Path | None = None) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        for _ in range(epochs):
            try:
                self.train_epoch(checkpoint_dir)
            except TrainingDiverged:
                if checkpoint_dir is not None:
                    log.error("training diverged; last healthy checkpoint is %s", checkpoint_dir)
                raise
        return self.history

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> str:
        meta = {
            "run_config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "model_config": self.model.cfg.to_dict(),
            "epoch": self.epoch,
            "lambda_c": self.lambda_c,
            "optimizer": self.opt.state_meta(),
            "rng_state": self.rng.bit_generator.state,
        }
        stores = {"online": self.model.params, "target": self.model.target, **self.opt.state_stores()}
        return gn.save_checkpoint(path, stores, meta)

    @classmethod
    def load(cls, path) -> "Trainer":
        stores, meta = gn.load_checkpoint(path)
        cfg = from_dict(meta["run_config"])
        mcfg = ModelConfig(**meta["model_config"])
        model = QBarrierModel(mcfg, stores["online"], stores["target"])
        tr = cls(cfg, model)
        tr.epoch = meta["epoch"]
        tr.lambda_c = meta["lambda_c"]
        tr.opt = gn.Adam.from_state(meta["optimizer"], stores.get("adam.m", gn.ParamStore()),
                                    stores.get("adam.v", gn.ParamStore()))
        tr.rng.bit_generator.state = meta["rng_state"]
        return tr


def _mean_report(reports: list[LossReport]) -> dict:
    if not reports:
        return {}
    keys = [k for k in asdict(reports[0]) if k != "lambda_c"]
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def load_model(path) -> tuple[QBarrierModel, RunConfig, dict]:
    stores, meta = gn.load_checkpoint(path)
    model = QBarrierModel(ModelConfig(**meta["model_config"]), stores["online"], stores["target"])
    return model, from_dict(meta["run_config"]), meta


def write_training_log(path, history: list[dict], meta: dict | None = None) -> None:
    import csv

    cols = ["epoch", "actor", "critic", "wm", "distill", "conj", "total", "lagrange_penalty", "grad_norm",
            "lambda_c", "train_return", "train_cost", "train_delta"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {json.dumps(v) if isinstance(v, (dict, list)) else v}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row.get(c, "") for c in cols])
