"""Policy callbacks for :func:`qbarrier.cmdp.run_context` and batched evaluation rollouts."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .cmdp import (ContextLog, EpisodeLog, TaskSpec, Transition, quantize_cost, read_trajectory_csv, run_context,
                   sample_task, write_trajectory_csv)
from .codec import embed_entry, encode, window_from_entries
from .model import QBarrierModel
from .policy import sample_actions
from .shield import read_decisions_csv, select_action, write_decisions_csv


class Agent:
    """History-conditioned actor, optionally wrapped by the shield.

    ``mode="base"`` samples the base policy without scoring candidates (used
    for data collection); ``off``/``soft``/``hard`` go through
    :func:`~qbarrier.shield.select_action` and attach a ShieldDecision to every step.
    """

    def __init__(self, model: QBarrierModel, mode: str = "soft", n_samples: int = 8, temperature: float = 1.0,
                 delta: float = 0.0, budget_scale: float = 1.0):
        self.model = model
        self.mode = mode
        self.n_samples = n_samples
        self.temperature = temperature
        self.extra = np.array([delta / budget_scale]) if model.cfg.budget_feature else None
        self._rows: list[np.ndarray] = []
        self._history_id = None
        self._source = model.params.digest()[:12]

    def _window(self, history, obs):
        cfg = self.model.cfg
        if self._history_id != id(history) or len(history) < len(self._rows):
            self._rows, self._history_id = [], id(history)
        for tr in history[len(self._rows):]:
            self._rows.append(embed_entry(cfg, tr.state, tr.action, tr.reward, tr.cost, tr.d_ctx))
        recent = self._rows[-cfg.window:]
        entries = np.array(recent) if recent else np.zeros((0, cfg.entry_dim))
        return window_from_entries(cfg, entries, obs, self.extra)

    def __call__(self, history, obs, budget, rng):
        window = self._window(history, obs)
        if self.mode == "base":
            lat = encode(self.model, window)
            a = sample_actions(self.model, lat.z_p, rng, n=1)[0]
            return (int(a) if self.model.cfg.discrete else a), None
        d = select_action(self.model, window, budget, self.mode, self.n_samples, rng, self.temperature, self._source)
        a = d.action
        return (int(a) if self.model.cfg.discrete else np.asarray(a)), d


def eval_tasks(cfg, n: int, alpha: float, seed: int) -> list[TaskSpec]:
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    return [sample_task(cfg.env, alpha, cfg.grid_size, cfg.n_obstacles, seed=s, v_limit=cfg.v_limit) for s in seeds]


def _run_one(args):
    model, task, K, delta, mode, n_samples, temperature, budget_scale, seed, cid = args
    agent = Agent(model, mode, n_samples, temperature, delta, budget_scale)
    return run_context(agent, task, K, None, delta, np.random.default_rng(seed), context_id=cid)


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("QBARRIER_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: QBarrierModel, tasks: Sequence[TaskSpec], K: int, delta, mode: str,
             n_samples: int = 8, temperature: float = 1.0, budget_scale: float = 1.0, seed: int = 0) -> list[ContextLog]:
    """One context per task. ``delta`` is one budget for all tasks or one per task.

    Rollout RNG streams depend only on (seed, task index), so variants compared
    at the same seed see the same task list and stream layout.
    """
    deltas = np.broadcast_to(np.asarray(delta, dtype=np.float64), (len(tasks),))
    streams = np.random.SeedSequence(seed).spawn(len(tasks))
    jobs = [(model, t, K, quantize_cost(float(d)), mode, n_samples, temperature, budget_scale, s, i)
            for i, (t, d, s) in enumerate(zip(tasks, deltas, streams))]
    workers = min(n_workers(), len(jobs))
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


def draw_budgets(lo: float, hi: float, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    return np.array([quantize_cost(x) for x in rng.uniform(lo, hi, size=n)])


# ---------------------------------------------------------------------------
# Run logs: trajectories + decisions + per-context metadata

TRAJECTORIES = "trajectories.csv"
DECISIONS = "decisions.csv"
CONTEXTS = "contexts.csv"


def write_run_logs(out_dir, logs: Sequence[ContextLog], meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / TRAJECTORIES, logs, meta)
    write_decisions_csv(out / DECISIONS, logs, meta)
    with open(out / CONTEXTS, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(["context_id", "delta", "task"])
        for lg in logs:
            w.writerow([lg.context_id, repr(lg.delta), json.dumps(lg.task.to_dict(), sort_keys=True)])
    return out


def read_contexts_csv(path) -> dict[int, tuple[float, TaskSpec]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return {int(r["context_id"]): (float(r["delta"]), TaskSpec.from_dict(json.loads(r["task"])))
            for r in csv.DictReader(lines)}


def read_run_logs(log_dir) -> tuple[list[ContextLog], list[dict]]:
    """Rebuild ContextLogs (with decisions, if logged) -> (logs, raw trajectory rows)."""
    d = Path(log_dir)
    for name in (TRAJECTORIES, CONTEXTS):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} is missing")
    ctx = read_contexts_csv(d / CONTEXTS)
    rows = read_trajectory_csv(d / TRAJECTORIES)
    any_task = next(iter(ctx.values()))[1] if ctx else None
    action_dim = None if any_task is None or any_task.discrete else any_task.action_dim
    decisions = read_decisions_csv(d / DECISIONS, action_dim) if (d / DECISIONS).exists() else {}
    logs: dict[int, ContextLog] = {}
    for row in rows:
        cid, k = row["context_id"], row["episode_k"]
        if cid not in ctx:
            raise ValueError(f"context {cid} missing from {CONTEXTS}")
        delta, task = ctx[cid]
        lg = logs.setdefault(cid, ContextLog(task=task, delta=delta, context_id=cid))
        while len(lg.episodes) <= k:
            lg.episodes.append(EpisodeLog())
            lg.budget_traces.append([delta])
        action = int(row["action"][0]) if task.discrete else row["action"]
        tr = Transition(state=row["state"], action=action, reward=row["reward"], cost=row["cost"],
                        next_state=np.array([]), done=row["done"], d_ctx=row["d_ctx"],
                        budget=row["budget_remaining"] + row["cost"], episode=k, t=row["t"],
                        decision=decisions.get((cid, k, row["t"])))
        lg.episodes[k].transitions.append(tr)
        lg.budget_traces[k].append(row["budget_remaining"])
    return [logs[c] for c in sorted(logs)], rows
