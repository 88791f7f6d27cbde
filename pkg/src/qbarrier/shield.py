"""Runtime Q-barrier shield over a finite candidate set.

For candidate ``a`` with pessimistic cost value ``q(a)`` and remaining budget ``B``::

    b_Q(a) = B - q(a)               action margin
    b_V    = B - min_a q(a)         state margin (= max_a b_Q(a))

soft:  pi(a) ∝ rho(a) * exp(-beta * [-b_Q(a)]_+)
hard:  rho renormalized on {b_Q >= 0}; if that set carries no base mass,
       uniform over the argmin of q (ties within ``TIE_TOL``).

``rho`` is the base-policy probability when the discrete action space is
enumerated and 1 for candidates sampled from a continuous policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import ContextWindow, ModelHealthError, encode
from .critics import q_plus as critic_q_plus
from .model import QBarrierModel
from .policy import action_probs, sample_actions

TIE_TOL = 1e-9
MODES = ("off", "soft", "hard")


@dataclass
class CandidateSet:
    actions: np.ndarray
    rho: np.ndarray
    origin: str  # "enumerated-discrete" | "sampled-continuous"
    source: str = ""

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("candidate set is empty")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class ShieldDecision:
    candidates: CandidateSet
    q_plus: np.ndarray
    b_q: np.ndarray
    b_v: float
    probs: np.ndarray
    index: int
    mode: str
    budget: float
    fallback: bool = False
    tie_set: tuple[int, ...] = ()
    z_w: np.ndarray | None = field(default=None, repr=False)

    @property
    def action(self):
        return self.candidates.actions[self.index]


def barriers(q_plus_values, budget: float) -> tuple[float, np.ndarray]:
    q = np.asarray(q_plus_values, dtype=np.float64)
    if q.size == 0:
        raise ValueError("candidate set is empty")
    b_q = budget - q
    return float(budget - q.min()), b_q


def soft_shield(rho, margins, temperature: float = 1.0) -> np.ndarray:
    """Exponential down-weighting of candidates with negative margin.

    Normalized in log space so large penalties do not underflow the whole set.
    """
    rho = np.asarray(rho, dtype=np.float64)
    b = np.asarray(margins, dtype=np.float64)
    live = rho > 0
    if not np.any(live):
        raise ValueError("soft shield needs at least one candidate with positive base weight")
    logw = np.full(rho.shape, -np.inf)
    logw[live] = np.log(rho[live]) - temperature * np.maximum(-b[live], 0.0)
    w = np.exp(logw - logw[live].max())
    return w / w.sum()


def hard_shield(rho, margins, q_plus_values, tie_tol: float = TIE_TOL) -> tuple[np.ndarray, bool, tuple[int, ...]]:
    """Returns ``(distribution, fallback_used, tie_set)``."""
    rho = np.asarray(rho, dtype=np.float64)
    safe = np.asarray(margins, dtype=np.float64) >= 0
    mass = rho * safe
    total = mass.sum()
    if total > 0:
        return mass / total, False, ()
    q = np.asarray(q_plus_values, dtype=np.float64)
    ties = np.flatnonzero(q - q.min() <= tie_tol)
    out = np.zeros(len(q))
    out[ties] = 1.0 / len(ties)
    return out, True, tuple(int(i) for i in ties)


def base_distribution(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return rho / rho.sum()


def build_candidates(model: QBarrierModel, z_p: np.ndarray, rng: np.random.Generator, n_samples: int = 8,
                     source: str = "") -> CandidateSet:
    if model.cfg.discrete:
        return CandidateSet(np.arange(model.cfg.n_actions), action_probs(model, z_p), "enumerated-discrete", source)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1 for continuous actions")
    acts = sample_actions(model, z_p, rng, n=n_samples)
    return CandidateSet(acts, np.ones(n_samples), "sampled-continuous", source)


def shield_distribution(mode: str, cand: CandidateSet, q: np.ndarray, budget: float, temperature: float = 1.0):
    """Distribution for a given mode -> (b_v, b_q, probs, fallback, tie_set)."""
    if mode not in MODES:
        raise ValueError(f"shield mode must be one of {MODES}, got {mode!r}")
    b_v, b_q = barriers(q, budget)
    fallback, ties = False, ()
    if mode == "soft":
        probs = soft_shield(cand.rho, b_q, temperature)
    elif mode == "hard":
        probs, fallback, ties = hard_shield(cand.rho, b_q, q)
    else:
        probs = base_distribution(cand.rho)
    return b_v, b_q, probs, fallback, ties


def select_action(model: QBarrierModel, window: ContextWindow, budget: float, mode: str = "soft",
                  n_samples: int = 8, rng: np.random.Generator | None = None, temperature: float = 1.0,
                  source: str = "") -> ShieldDecision:
    """Encode, build candidates, score them with the pessimistic cost critic, apply the shield, sample.

    Reads model parameters only. In ``off`` mode the critic values are still
    logged but play no part in the choice.
    """
    rng = rng if rng is not None else np.random.default_rng()
    lat = encode(model, window)
    cand = build_candidates(model, lat.z_p, rng, n_samples, source)
    q = critic_q_plus(model, lat.z_w, model.embed_action(cand.actions))
    if not np.all(np.isfinite(q)):
        raise ModelHealthError("non-finite cost critic values; shield refuses to act")
    b_v, b_q, probs, fallback, ties = shield_distribution(mode, cand, q, budget, temperature)
    idx = int(rng.choice(len(probs), p=probs))
    return ShieldDecision(cand, q, b_q, b_v, probs, idx, mode, budget, fallback, ties, lat.z_w)


# ---------------------------------------------------------------------------
# Decision log CSV

DECISION_COLUMNS = ["context_id", "episode_k", "t", "mode", "budget", "b_v", "chosen", "fallback", "n_candidates",
                    "candidates", "rho", "q_plus", "b_q", "probs", "z_w"]


def _vec(x) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(x, dtype=np.float64).reshape(-1))


def decision_row(context_id: int, episode: int, t: int, d: ShieldDecision) -> list:
    return [context_id, episode, t, d.mode, repr(d.budget), repr(d.b_v), d.index, int(d.fallback),
            len(d.candidates), _vec(d.candidates.actions), _vec(d.candidates.rho), _vec(d.q_plus),
            _vec(d.b_q), _vec(d.probs), "" if d.z_w is None else _vec(d.z_w)]


def write_decisions_csv(path, logs: Sequence, meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(DECISION_COLUMNS)
        for log in logs:
            for tr in log.transitions():
                if tr.decision is not None:
                    w.writerow(decision_row(log.context_id, tr.episode, tr.t, tr.decision))


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()], dtype=np.float64)


def read_decisions_csv(path, action_dim: int | None = None) -> dict[tuple[int, int, int], ShieldDecision]:
    """Decisions keyed by (context_id, episode_k, t).

    ``action_dim`` reshapes continuous candidates; ``None`` reads discrete indices.
    """
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        acts = _parse_vec(row["candidates"])
        acts = acts.astype(np.int64) if action_dim is None else acts.reshape(-1, action_dim)
        origin = "enumerated-discrete" if action_dim is None else "sampled-continuous"
        cand = CandidateSet(acts, _parse_vec(row["rho"]), origin)
        ties = ()
        q = _parse_vec(row["q_plus"])
        if int(row["fallback"]):
            ties = tuple(int(i) for i in np.flatnonzero(q - q.min() <= TIE_TOL))
        z_w = _parse_vec(row["z_w"]) if row.get("z_w") else None
        key = (int(row["context_id"]), int(row["episode_k"]), int(row["t"]))
        out[key] = ShieldDecision(cand, q, _parse_vec(row["b_q"]), float(row["b_v"]), _parse_vec(row["probs"]),
                                  int(row["chosen"]), row["mode"], float(row["budget"]), bool(int(row["fallback"])),
                                  ties, z_w)
    return out
