"""Constrained-MDP environments, task sampling, rollouts and budget accounting.

Two environments:

* ``gridworld`` -- a dark-room style grid. The agent sees only its own
  position; goal and obstacle cells are hidden and must be inferred from
  reward and cost signals in the context. 5 actions (up, down, left, right,
  stay), reward 1 on reaching the goal (ends the episode), cost 1 whenever the
  agent ends a step on an obstacle.
* ``velocity`` -- a 1-D acceleration toy standing in for velocity-tracking
  locomotion tasks. Hidden target velocity, reward ``-|v - v_target|``, cost
  ``[|v| - v_limit]_+``. It exists to exercise continuous candidate sampling.

Velocity costs and budgets are quantized to multiples of ``COST_QUANTUM`` so
that remaining-budget arithmetic is exact in float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GRID_ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))  # up, down, left, right, stay
GRID_HORIZON = 30
VELOCITY_HORIZON = 75
COST_QUANTUM = 2.0**-20


class SamplingError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


class RolloutAborted(RuntimeError):
    """Raised when the policy callback fails; carries the logs gathered so far."""

    def __init__(self, message: str, partial: "ContextLog"):
        super().__init__(message)
        self.partial = partial


def quantize_cost(x: float) -> float:
    return math.floor(x / COST_QUANTUM + 0.5) * COST_QUANTUM


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    grid_size: int = 5
    goal: tuple[int, int] | None = None
    obstacles: frozenset = frozenset()
    start: tuple[int, int] | None = None
    alpha: float = 0.0
    seed: int = 0
    v_target: float = 0.0
    v_limit: float = 1.5
    accel_gain: float = 0.25
    v_max: float = 3.0

    def __post_init__(self):
        if self.kind == "gridworld":
            if self.goal in self.obstacles:
                raise ContractViolation("goal cell is an obstacle")
            if self.start in self.obstacles:
                raise ContractViolation("start cell is an obstacle")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "grid_size": self.grid_size, "goal": list(self.goal) if self.goal else None,
                "obstacles": sorted(list(o) for o in self.obstacles),
                "start": list(self.start) if self.start else None, "alpha": self.alpha, "seed": self.seed,
                "v_target": self.v_target, "v_limit": self.v_limit, "accel_gain": self.accel_gain,
                "v_max": self.v_max}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["goal"] = tuple(d["goal"]) if d.get("goal") is not None else None
        d["start"] = tuple(d["start"]) if d.get("start") is not None else None
        d["obstacles"] = frozenset(tuple(o) for o in d.get("obstacles", ()))
        return cls(**d)

    @property
    def discrete(self) -> bool:
        return self.kind == "gridworld"

    @property
    def obs_dim(self) -> int:
        return 2 if self.kind == "gridworld" else 1

    @property
    def n_actions(self) -> int:
        return len(GRID_ACTIONS) if self.kind == "gridworld" else 0

    @property
    def action_dim(self) -> int:
        return len(GRID_ACTIONS) if self.kind == "gridworld" else 1

    @property
    def horizon(self) -> int:
        return GRID_HORIZON if self.kind == "gridworld" else VELOCITY_HORIZON


# ---------------------------------------------------------------------------
# Spawn distribution


def grid_cells(grid_size: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(grid_size) for c in range(grid_size)]


def center_distance(cell, grid_size: int) -> float:
    c = (grid_size - 1) / 2.0
    return math.hypot(cell[0] - c, cell[1] - c)


def spawn_law(grid_size: int, alpha: float, exclude: Sequence = ()) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Cells and probabilities with p(x) proportional to exp(alpha * d(x, center)).

    ``alpha < 0`` concentrates mass at the center (training layouts),
    ``alpha > 0`` pushes it to the edges (evaluation layouts).
    """
    excluded = set(map(tuple, exclude))
    cells = [x for x in grid_cells(grid_size) if x not in excluded]
    logits = np.array([alpha * center_distance(x, grid_size) for x in cells])
    w = np.exp(logits - logits.max())
    return cells, w / w.sum()


def draw_cells(cells, probs: np.ndarray, n: int, rng: np.random.Generator, replace: bool = True) -> list:
    idx = rng.choice(len(cells), size=n, replace=replace, p=probs)
    return [cells[i] for i in np.atleast_1d(idx)]


def sample_task(kind: str, alpha: float = 0.0, grid_size: int = 5, n_obstacles: int = 4, seed: int = 0,
                v_target_range: tuple[float, float] = (0.5, 2.0), v_limit: float = 1.5) -> TaskSpec:
    """Draw a task. Gridworld goal and obstacles come from :func:`spawn_law` without replacement."""
    rng = np.random.default_rng(seed)
    if kind == "velocity":
        v_target = float(rng.uniform(*v_target_range))
        return TaskSpec(kind="velocity", alpha=alpha, seed=seed, v_target=v_target, v_limit=v_limit)
    if kind != "gridworld":
        raise ContractViolation(f"unknown environment kind {kind!r}")
    if grid_size < 3:
        raise ContractViolation("grid_size must be >= 3")
    if n_obstacles >= grid_size * grid_size - 2:
        raise ContractViolation("too many obstacles for the grid")
    start = (grid_size // 2, grid_size // 2)
    cells, probs = spawn_law(grid_size, alpha, exclude=[start])
    if np.count_nonzero(probs) < n_obstacles + 1:
        raise SamplingError(f"spawn law has fewer than {n_obstacles + 1} cells with positive mass")
    picked = draw_cells(cells, probs, n_obstacles + 1, rng, replace=False)
    return TaskSpec(kind="gridworld", grid_size=grid_size, goal=picked[0], obstacles=frozenset(picked[1:]),
                    start=start, alpha=alpha, seed=seed)


# ---------------------------------------------------------------------------
# Dynamics


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    cost: float
    next_state: np.ndarray
    done: bool = False
    d_ctx: bool = False
    budget: float = 0.0  # B_t before acting
    episode: int = 0
    t: int = 0
    decision: object = None

    @property
    def budget_remaining(self) -> float:
        return self.budget - self.cost


def initial_state(task: TaskSpec) -> np.ndarray:
    if task.kind == "gridworld":
        return np.array(task.start, dtype=np.int64)
    return np.zeros(1)


def observe(task: TaskSpec, state: np.ndarray) -> np.ndarray:
    """Agent observation: normalized own position (gridworld) or velocity."""
    if task.kind == "gridworld":
        return np.asarray(state, dtype=np.float64) / (task.grid_size - 1)
    return np.asarray(state, dtype=np.float64).copy()


def step(task: TaskSpec, state: np.ndarray, action) -> tuple[np.ndarray, float, float, bool]:
    """One environment step -> (next_state, reward, cost, terminal)."""
    if task.kind == "gridworld":
        a = int(action)
        if not 0 <= a < len(GRID_ACTIONS) or a != action:
            raise ContractViolation(f"gridworld action must be in 0..4, got {action!r}")
        dr, dc = GRID_ACTIONS[a]
        r, c = int(state[0]) + dr, int(state[1]) + dc
        if not (0 <= r < task.grid_size and 0 <= c < task.grid_size):
            r, c = int(state[0]), int(state[1])
        nxt = np.array([r, c], dtype=np.int64)
        cost = 1.0 if (r, c) in task.obstacles else 0.0
        reached = (r, c) == task.goal
        return nxt, (1.0 if reached else 0.0), cost, reached
    a = float(np.asarray(action).reshape(-1)[0])
    if not -1.0 <= a <= 1.0 or math.isnan(a):
        raise ContractViolation(f"velocity action must lie in [-1, 1], got {a}")
    v = float(np.clip(state[0] + task.accel_gain * a, -task.v_max, task.v_max))
    reward = -abs(v - task.v_target)
    cost = quantize_cost(max(abs(v) - task.v_limit, 0.0))
    return np.array([v]), reward, cost, False


# ---------------------------------------------------------------------------
# Episodes and contexts


@dataclass
class EpisodeLog:
    transitions: list[Transition] = field(default_factory=list)

    @property
    def G(self) -> float:
        return float(math.fsum(tr.reward for tr in self.transitions))

    @property
    def G_c(self) -> float:
        return float(math.fsum(tr.cost for tr in self.transitions))

    def return_to_go(self) -> np.ndarray:
        r = np.array([tr.reward for tr in self.transitions] + [0.0])
        return np.cumsum(r[::-1])[::-1][: len(self.transitions) + 1]

    def cost_to_go(self) -> np.ndarray:
        """G_{c,t} for t = 0..T: ``out[0] == G_c`` and ``out[T] == 0``."""
        c = np.array([tr.cost for tr in self.transitions] + [0.0])
        return np.cumsum(c[::-1])[::-1][: len(self.transitions) + 1]

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class BudgetState:
    delta: float
    cumulative: float = 0.0

    @property
    def remaining(self) -> float:
        return self.delta - self.cumulative

    def charge(self, cost: float) -> float:
        if cost < 0:
            raise ContractViolation(f"negative cost {cost}")
        self.cumulative += cost
        return self.remaining


@dataclass
class ContextLog:
    task: TaskSpec
    delta: float
    episodes: list[EpisodeLog] = field(default_factory=list)
    budget_traces: list[list[float]] = field(default_factory=list)
    context_id: int = 0

    def transitions(self) -> list[Transition]:
        return [tr for ep in self.episodes for tr in ep.transitions]

    def episode_costs(self) -> list[float]:
        return [ep.G_c for ep in self.episodes]

    def episode_returns(self) -> list[float]:
        return [ep.G for ep in self.episodes]


# policy(history, obs, budget, rng) -> action, or (action, decision)
Policy = Callable[[list, np.ndarray, float, np.random.Generator], object]


def run_context(policy: Policy, task: TaskSpec, K: int, T: int | None, delta: float,
                rng: np.random.Generator | None = None, context_id: int = 0) -> ContextLog:
    """Roll out K episodes in one context; the budget resets to ``delta`` each episode.

    ``history`` passed to the policy is the list of Transitions so far in the
    context (all previous episodes plus the current prefix).
    """
    if K < 1:
        raise ContractViolation("K must be >= 1")
    T = task.horizon if T is None else T
    if T < 1:
        raise ContractViolation("T must be >= 1")
    if delta < 0:
        raise ContractViolation("delta must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    log = ContextLog(task=task, delta=delta, context_id=context_id)
    history: list[Transition] = []
    for k in range(K):
        budget = BudgetState(delta)
        trace = [budget.remaining]
        ep = EpisodeLog()
        log.episodes.append(ep)
        log.budget_traces.append(trace)
        state = initial_state(task)
        for t in range(T):
            obs = observe(task, state)
            try:
                out = policy(history, obs, budget.remaining, rng)
            except Exception as exc:  # noqa: BLE001 - any callback failure aborts the rollout
                raise RolloutAborted(f"policy failed at episode {k}, step {t}: {exc}", log) from exc
            action, decision = out if isinstance(out, tuple) else (out, None)
            nxt, reward, cost, terminal = step(task, state, action)
            tr = Transition(state=obs, action=action, reward=reward, cost=cost,
                            next_state=observe(task, nxt), budget=budget.remaining,
                            episode=k, t=t, decision=decision)
            budget.charge(cost)
            trace.append(budget.remaining)
            end = terminal or t == T - 1
            tr.d_ctx = end
            tr.done = end and k == K - 1
            ep.transitions.append(tr)
            history.append(tr)
            state = nxt
            if end:
                break
    return log


# ---------------------------------------------------------------------------
# Trajectory CSV

TRAJECTORY_COLUMNS = ["context_id", "episode_k", "t", "state", "action", "reward", "cost", "done", "d_ctx",
                      "budget_remaining"]


def _fmt_vec(x) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(x, dtype=np.float64).reshape(-1))


def write_trajectory_csv(path, logs: Sequence[ContextLog], meta: dict | None = None) -> None:
    """One row per Transition. Vector fields are space-separated inside one column."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for log in logs:
            for tr in log.transitions():
                w.writerow([log.context_id, tr.episode, tr.t, _fmt_vec(tr.state), _fmt_vec(tr.action),
                            repr(tr.reward), repr(tr.cost), int(tr.done), int(tr.d_ctx),
                            repr(tr.budget_remaining)])


def read_trajectory_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        rows.append(
            {
                "context_id": int(row["context_id"]),
                "episode_k": int(row["episode_k"]),
                "t": int(row["t"]),
                "state": np.array([float(v) for v in row["state"].split()]),
                "action": np.array([float(v) for v in row["action"].split()]),
                "reward": float(row["reward"]),
                "cost": float(row["cost"]),
                "done": bool(int(row["done"])),
                "d_ctx": bool(int(row["d_ctx"])),
                "budget_remaining": float(row["budget_remaining"]),
            }
        )
    return rows


def check_budget_identity(rows: Sequence[dict], deltas: dict[int, float]) -> list[int]:
    """Row indices where B_{t+1} + sum of episode costs so far != delta (exact)."""
    bad = []
    spent: dict[tuple[int, int], float] = {}
    for i, row in enumerate(rows):
        key = (row["context_id"], row["episode_k"])
        spent[key] = spent.get(key, 0.0) + row["cost"]
        if row["budget_remaining"] + spent[key] != deltas[row["context_id"]]:
            bad.append(i)
    return bad
