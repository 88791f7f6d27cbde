"""Post-hoc diagnostics on shielded rollouts and the margin-propagation checks.

Every quantity is computed from the ShieldDecisions stored in a log, so the
checks see exactly the latents, candidate sets and critic values the shield
used. With ``V(x) = min_j Q+(x, A'_j)`` over the next decision's candidates:

    e_pred     = ||f_z(z_w, a) - z_w'||
    e_V        = |V(f_z) - V(z_w')|
    L_local    = max_j |Q+(f_z, A'_j) - Q+(z_w', A'_j)| / (e_pred + 1e-8)
    bell       = [C + V(f_z) - Q+(z_w, a)]_+
    sel        = Q+(z_w, a) - min_j Q+(z_w, A_j)

On the last step of an episode both values are 0 and there is no next latent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cmdp import ContextLog
from .critics import head_values
from .model import QBarrierModel
from .world_model import f_z

LIPSCHITZ_EPS = 1e-8
BELLMAN_SAT = 1e-6
IDENTITY_TOL = 1e-4
FLOAT_TOL = 1e-9


class MissingDecisions(ValueError):
    """The log lacks the stored candidate sets the diagnostics need."""


class Scorer:
    """Critic and dynamics used by the diagnostics. Subclass for tabular oracles."""

    def q_heads(self, z_w: np.ndarray, a_emb: np.ndarray) -> np.ndarray:  # (M, ...)
        raise NotImplementedError

    def dynamics(self, z_w: np.ndarray, a_emb: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed(self, actions) -> np.ndarray:
        raise NotImplementedError


class ModelScorer(Scorer):
    def __init__(self, model: QBarrierModel):
        self.model = model

    def q_heads(self, z_w, a_emb):
        return head_values(self.model, "cost", z_w, a_emb)

    def dynamics(self, z_w, a_emb):
        return f_z(self.model, z_w, a_emb)

    def embed(self, actions):
        return self.model.embed_action(actions)


@dataclass
class DiagRecord:
    context_id: int
    episode: int
    t: int
    budget: float  # B_t
    cost: float  # C_{t+1}
    q_sel: float
    b_q: float
    b_v: float  # at the decision state
    b_v_next: float
    v_f: float
    v_next: float
    e_pred: float
    e_v: float
    l_local: float
    delta_bell: float
    delta_sel: float
    delta_bell_mean: float
    terminal: bool


def _pairs(log: ContextLog):
    for ep in log.episodes:
        trs = ep.transitions
        for i, tr in enumerate(trs):
            if tr.decision is None or getattr(tr.decision, "z_w", None) is None:
                raise MissingDecisions(
                    f"context {log.context_id} episode {tr.episode} step {tr.t} has no stored shield decision")
            yield tr, (trs[i + 1] if i + 1 < len(trs) else None)


def diagnose(logs: Sequence[ContextLog], scorer: Scorer | QBarrierModel,
             realized_dynamics: bool = False) -> list[DiagRecord]:
    """One DiagRecord per logged transition.

    ``realized_dynamics`` replaces f_z by the recorded next latent (oracle dynamics).
    """
    if isinstance(scorer, QBarrierModel):
        scorer = ModelScorer(scorer)
    out = []
    for log in logs:
        for tr, nxt in _pairs(log):
            d = tr.decision
            q = np.asarray(d.q_plus, dtype=np.float64)
            q_sel = float(q[d.index])
            b_t = float(d.budget)
            cost = float(tr.cost)
            a_emb = scorer.embed(np.asarray(d.action))
            heads_now = scorer.q_heads(d.z_w, scorer.embed(d.candidates.actions))
            q_mean_sel = float(heads_now.mean(axis=0)[d.index])
            if nxt is None:
                v_f = v_next = 0.0
                v_f_mean = 0.0
                e_pred, e_v, l_loc = math.nan, 0.0, math.nan
            else:
                dn = nxt.decision
                z_next = np.asarray(dn.z_w, dtype=np.float64)
                fz = z_next.copy() if realized_dynamics else scorer.dynamics(d.z_w, a_emb)
                nemb = scorer.embed(dn.candidates.actions)
                h_f = scorer.q_heads(fz, nemb)
                q_f = h_f.max(axis=0)
                q_n = np.asarray(dn.q_plus, dtype=np.float64)
                v_f, v_next = float(q_f.min()), float(q_n.min())
                v_f_mean = float(h_f.mean(axis=0).min())
                e_pred = float(np.linalg.norm(fz - z_next))
                e_v = abs(v_f - v_next)
                l_loc = float(np.max(np.abs(q_f - q_n))) / (e_pred + LIPSCHITZ_EPS)
            out.append(DiagRecord(
                context_id=log.context_id, episode=tr.episode, t=tr.t, budget=b_t, cost=cost, q_sel=q_sel,
                b_q=b_t - q_sel, b_v=float(d.b_v), b_v_next=(b_t - cost) - v_next, v_f=v_f, v_next=v_next,
                e_pred=e_pred, e_v=e_v, l_local=l_loc,
                delta_bell=max(cost + v_f - q_sel, 0.0), delta_sel=q_sel - float(q.min()),
                delta_bell_mean=max(cost + v_f_mean - q_mean_sel, 0.0), terminal=nxt is None,
            ))
    return out


# ---------------------------------------------------------------------------
# Summary


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(np.mean(x)), se


SUMMARY_FIELDS = ("e_pred", "e_v", "l_local", "delta_bell", "bell_sat", "delta_bell_mean", "bell_sat_mean",
                  "delta_sel")


def summarize(records: Sequence[DiagRecord], threshold: float = BELLMAN_SAT) -> dict:
    """Per-rollout means, then mean and standard error across rollouts.

    ``bell_sat`` is the fraction of transitions with bell <= threshold under
    the pessimistic critic, ``bell_sat_mean`` the same under the head average.
    """
    by_ctx: dict[int, list[DiagRecord]] = {}
    for r in records:
        by_ctx.setdefault(r.context_id, []).append(r)
    rows = {k: [] for k in SUMMARY_FIELDS}
    for recs in by_ctx.values():
        col = {f: np.array([getattr(r, f) for r in recs], dtype=np.float64)
               for f in ("e_pred", "e_v", "l_local", "delta_bell", "delta_bell_mean", "delta_sel")}
        for f, v in col.items():
            rows[f].append(np.nanmean(v) if np.any(np.isfinite(v)) else math.nan)
        rows["bell_sat"].append(float(np.mean(col["delta_bell"] <= threshold)))
        rows["bell_sat_mean"].append(float(np.mean(col["delta_bell_mean"] <= threshold)))
    out = {"n_records": len(records), "n_rollouts": len(by_ctx)}
    for f, vals in rows.items():
        m, se = _mean_se(np.array(vals, dtype=np.float64))
        out[f"{f}_mean"], out[f"{f}_se"] = m, se
    e = np.array([r.e_pred for r in records], dtype=np.float64)
    out["e_pred_max"] = float(np.nanmax(e)) if np.any(np.isfinite(e)) else math.nan
    return out


# ---------------------------------------------------------------------------
# Checks


@dataclass
class Verdict:
    n: int
    identity_failures: list[int] = field(default_factory=list)
    inequality_failures: list[int] = field(default_factory=list)
    max_residual: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.identity_failures and not self.inequality_failures


def check_margin_propagation(records: Sequence[DiagRecord], tol: float = IDENTITY_TOL) -> Verdict:
    """b_V' = b_Q + (Q+ - C - V(f_z)) + (V(f_z) - V(z')) and b_V' >= b_Q - bell - e_V."""
    v = Verdict(n=len(records))
    for i, r in enumerate(records):
        rhs = r.b_q + (r.q_sel - r.cost - r.v_f) + (r.v_f - r.v_next)
        res = abs(r.b_v_next - rhs)
        v.max_residual = max(v.max_residual, res)
        if not res <= tol:
            v.identity_failures.append(i)
        if not r.b_v_next >= r.b_q - r.delta_bell - r.e_v - FLOAT_TOL:
            v.inequality_failures.append(i)
    return v


@dataclass
class EpisodeBoundReport:
    context_id: int
    episode: int
    G_c: float
    delta: float
    b_v0: float
    residual_sum: float  # sum of sel + bell + e_V

    @property
    def lhs(self) -> float:
        return self.G_c - self.delta

    @property
    def rhs(self) -> float:
        return -self.b_v0 + self.residual_sum

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def episode_reports(records: Sequence[DiagRecord], logs: Sequence[ContextLog]) -> list[EpisodeBoundReport]:
    deltas = {lg.context_id: lg.delta for lg in logs}
    groups: dict[tuple[int, int], list[DiagRecord]] = {}
    for r in records:
        groups.setdefault((r.context_id, r.episode), []).append(r)
    out = []
    for (cid, k), recs in groups.items():
        recs = sorted(recs, key=lambda r: r.t)
        if not recs[-1].terminal:
            raise ValueError(f"context {cid} episode {k}: last record is not terminal")
        out.append(EpisodeBoundReport(
            context_id=cid, episode=k, G_c=math.fsum(r.cost for r in recs), delta=deltas[cid], b_v0=recs[0].b_v,
            residual_sum=math.fsum(r.delta_sel + r.delta_bell + r.e_v for r in recs)))
    return out


def check_episode_bound(reports: Sequence[EpisodeBoundReport], tol: float = FLOAT_TOL) -> list[int]:
    """Indices of episodes violating G_c - delta <= -b_V0 + sum(sel + bell + e_V)."""
    return [i for i, r in enumerate(reports) if not r.slack >= -tol]


@dataclass
class OverlapReport:
    n_pairs: int = 0
    n_margin: int = 0  # margin precondition held
    n_applicable: int = 0  # drift condition held as well
    failures: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def applicability(self) -> float:
        return self.n_applicable / self.n_pairs if self.n_pairs else 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def check_overlap(logs: Sequence[ContextLog], scorer: Scorer | QBarrierModel, eta: float = 0.5,
                  tol: float = FLOAT_TOL) -> OverlapReport:
    """For every action A shared by consecutive candidate sets with Q+(z, A) <= B - eta,
    if L * ||z' - z|| + |B' - B| <= eta (L the per-pair ratio for A), then A must be safe at t+1."""
    if isinstance(scorer, QBarrierModel):
        scorer = ModelScorer(scorer)
    rep = OverlapReport()
    for log in logs:
        for tr, nxt in _pairs(log):
            if nxt is None:
                continue
            d0, d1 = tr.decision, nxt.decision
            a0 = np.asarray(d0.candidates.actions)
            a1 = np.asarray(d1.candidates.actions)
            for i, act in enumerate(a0):
                match = [j for j, b in enumerate(a1) if np.array_equal(b, act)]
                if not match:
                    continue
                j = match[0]
                rep.n_pairs += 1
                if not d0.q_plus[i] <= d0.budget - eta:
                    continue
                rep.n_margin += 1
                dz = float(np.linalg.norm(np.asarray(d1.z_w) - np.asarray(d0.z_w)))
                dq = abs(float(d1.q_plus[j]) - float(d0.q_plus[i]))
                ratio = dq / dz if dz > 0 else 0.0
                if dz == 0 and dq > 0:
                    continue  # latent unchanged but value moved: no finite ratio, precondition fails
                if ratio * dz + abs(d1.budget - d0.budget) > eta:
                    continue
                rep.n_applicable += 1
                if not d1.q_plus[j] <= d1.budget + tol:
                    rep.failures.append((log.context_id, tr.episode, tr.t, i))
    return rep


# ---------------------------------------------------------------------------
# CSV

DIAG_COLUMNS = [f for f in DiagRecord.__dataclass_fields__]


def write_diagnostics_csv(path, records: Sequence[DiagRecord], meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(DIAG_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else (int(d[c]) if isinstance(d[c], bool) else d[c])
                        for c in DIAG_COLUMNS])


def write_summary_csv(path, summary: dict, meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, v])
