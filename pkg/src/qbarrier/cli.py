"""Command-line entry points: ``qbarrier {train,eval-adapt,eval-budget,ablate,diagnose,spawn-check}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import gradnet as gn
from .cmdp import check_budget_identity, draw_cells, spawn_law
from .config import ConfigError, RunConfig, load_config, write_resolved
from .probe import (MissingDecisions, check_episode_bound, check_margin_propagation, check_overlap, diagnose,
                    episode_reports, summarize, write_diagnostics_csv, write_summary_csv)
from .rollout import draw_budgets, eval_tasks, evaluate, read_run_logs, write_run_logs
from .trainer import Trainer, TrainingDiverged, load_model, write_training_log

SCHEMA_VERSION = 1
log = logging.getLogger("qbarrier")

ADAPT_COLUMNS = ["variant", "mode", "n_samples", "task", "alpha", "delta", "episode_k", "return", "cost", "steps",
                 "n_decisions", "fallback_rate"]
ADAPT_SUMMARY_COLUMNS = ["variant", "episode_k", "n", "return_mean", "return_se", "cost_mean", "cost_se",
                         "fallback_rate"]
BUDGET_COLUMNS = ["variant", "mode", "delta", "task", "cum_return", "avg_cost", "satisfied"]
BUDGET_SUMMARY_COLUMNS = ["variant", "delta", "n", "return_mean", "return_se", "cost_mean", "cost_se",
                          "satisfied_rate"]


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _meta(command: str, cfg: RunConfig, ckpt_digest: str = "") -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "config_digest": cfg.digest(),
            "checkpoint_digest": ckpt_digest or "none"}


def _write_rows(path: Path, columns, rows, meta) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return math.nan, math.nan
    return float(x.mean()), (float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0)


def _parse_list(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if not vals:
        raise CliError("--budget-grid must name at least one budget")
    return vals


def _resolve(args, base: RunConfig | None = None) -> RunConfig:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else (base or RunConfig())
        over = {
            "seed": getattr(args, "seed", None),
            "shield": getattr(args, "shield", None),
            "n_samples": getattr(args, "ns", None),
            "alpha_test": getattr(args, "alpha", None),
            "eval_tasks": getattr(args, "tasks", None),
            "eval_episodes": getattr(args, "episodes", None),
            "epochs": getattr(args, "epochs", None),
            "budget_grid": _parse_list(getattr(args, "budget_grid", None)),
        }
        return cfg.with_overrides(**over)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _load(args):
    """Checkpoint + evaluation config. A config whose model layout differs from the checkpoint is refused."""
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    try:
        model, train_cfg, _ = load_model(args.checkpoint)
    except (FileNotFoundError, gn.ConfigurationError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    cfg = _resolve(args, base=train_cfg)
    if cfg.model_config() != model.cfg:
        raise CliError("config does not match the checkpoint's model layout "
                       f"({cfg.model_config()} vs {model.cfg})")
    return model, cfg, gn.checkpoint_digest(args.checkpoint)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _budget_scale(cfg: RunConfig) -> float:
    return max(cfg.budget_bounds[1], 1e-9)


def _episode_rows(variant: str, mode: str, ns: int, logs, alpha: float) -> list[dict]:
    rows = []
    for lg in logs:
        for k, ep in enumerate(lg.episodes):
            decs = [tr.decision for tr in ep.transitions if tr.decision is not None]
            fb = sum(d.fallback for d in decs) / len(decs) if decs else 0.0
            rows.append({"variant": variant, "mode": mode, "n_samples": ns, "task": lg.context_id, "alpha": alpha,
                         "delta": lg.delta, "episode_k": k, "return": ep.G, "cost": ep.G_c, "steps": len(ep),
                         "n_decisions": len(decs), "fallback_rate": fb})
    return rows


def _adapt_summary(rows) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["episode_k"]), []).append(r)
    out = []
    for (variant, k), rs in groups.items():
        rm, rse = _mean_se([r["return"] for r in rs])
        cm, cse = _mean_se([r["cost"] for r in rs])
        out.append({"variant": variant, "episode_k": k, "n": len(rs), "return_mean": rm, "return_se": rse,
                    "cost_mean": cm, "cost_se": cse,
                    "fallback_rate": float(np.mean([r["fallback_rate"] for r in rs]))})
    return out


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _plot(fn, *paths) -> None:
    try:
        fn(*paths)
    except Exception as exc:  # noqa: BLE001 - plots are a convenience layer
        log.warning("plot %s failed: %s", paths[-1], exc)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = _out(args)
    if args.checkpoint:
        tr = Trainer.load(args.checkpoint)
        cfg = _resolve(args, base=tr.cfg)
        tr.cfg = cfg
    else:
        cfg = _resolve(args)
        tr = Trainer(cfg)
    write_resolved(cfg, out)
    ckpt = out / "checkpoint"
    tr.save(ckpt)
    remaining = max(0, cfg.epochs - tr.epoch)
    for _ in range(remaining):
        try:
            tr.train_epoch(ckpt)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}; last healthy checkpoint: {ckpt}", file=sys.stderr)
            return 1
        tr.save(ckpt)
    digest = gn.checkpoint_digest(ckpt)
    write_training_log(out / "training_log.csv", tr.history, _meta("train", cfg, digest))
    if tr.history:
        from .plots import plot_training
        _plot(plot_training, out / "training_log.csv", out / "training.svg")
    print(f"checkpoint {ckpt} digest {digest}")
    return 0


def _adapt_variants(cfg: RunConfig) -> list[tuple[str, str, int]]:
    variants = [("base", "off", cfg.n_samples)]
    if cfg.shield != "off":
        variants.append((cfg.shield, cfg.shield, cfg.n_samples))
    return variants


def _run_variants(model, cfg, variants, tasks, deltas, out: Path, meta: dict, alpha: float) -> list[dict]:
    rows = []
    for name, mode, ns in variants:
        logs = evaluate(model, tasks, cfg.eval_episodes, deltas, mode, ns, cfg.temperature, _budget_scale(cfg),
                        cfg.seed)
        write_run_logs(out / "logs" / name, logs, {**meta, "variant": name})
        rows += _episode_rows(name, mode, ns, logs, alpha)
    return rows


def cmd_eval_adapt(args) -> int:
    model, cfg, digest = _load(args)
    out = _out(args)
    write_resolved(cfg, out)
    meta = _meta("eval-adapt", cfg, digest)
    tasks = eval_tasks(cfg, cfg.eval_tasks, cfg.alpha_test, cfg.seed)
    deltas = draw_budgets(*cfg.budget_bounds, len(tasks), cfg.seed)
    if cfg.budget_grid is not None:
        rows = []
        for d in cfg.budget_points:
            sub = out / f"delta_{d:g}"
            rows += _run_variants(model, cfg, [(f"{n}@{d:g}", m, s) for n, m, s in _adapt_variants(cfg)], tasks,
                                  d, sub, meta, cfg.alpha_test)
    else:
        rows = _run_variants(model, cfg, _adapt_variants(cfg), tasks, deltas, out, meta, cfg.alpha_test)
    _write_rows(out / "adaptation.csv", ADAPT_COLUMNS, rows, meta)
    _write_rows(out / "adaptation_summary.csv", ADAPT_SUMMARY_COLUMNS, _adapt_summary(rows), meta)
    from .plots import plot_adaptation
    _plot(plot_adaptation, out / "adaptation_summary.csv", out / "adaptation.svg")
    print(f"wrote {out / 'adaptation.csv'} ({len(rows)} rows)")
    return 0


def cmd_eval_budget(args) -> int:
    model, cfg, digest = _load(args)
    out = _out(args)
    write_resolved(cfg, out)
    meta = _meta("eval-budget", cfg, digest)
    tasks = eval_tasks(cfg, cfg.eval_tasks, cfg.alpha_test, cfg.seed)
    rows, summary = [], []
    for name, mode, ns in _adapt_variants(cfg):
        for d in cfg.budget_points:
            logs = evaluate(model, tasks, cfg.eval_episodes, d, mode, ns, cfg.temperature, _budget_scale(cfg),
                            cfg.seed)
            per = []
            for lg in logs:
                avg_cost = float(np.mean(lg.episode_costs()))
                per.append({"variant": name, "mode": mode, "delta": lg.delta, "task": lg.context_id,
                            "cum_return": float(sum(lg.episode_returns())), "avg_cost": avg_cost,
                            "satisfied": int(avg_cost <= lg.delta)})
            rows += per
            rm, rse = _mean_se([r["cum_return"] for r in per])
            cm, cse = _mean_se([r["avg_cost"] for r in per])
            summary.append({"variant": name, "delta": per[0]["delta"], "n": len(per), "return_mean": rm,
                            "return_se": rse, "cost_mean": cm, "cost_se": cse,
                            "satisfied_rate": float(np.mean([r["satisfied"] for r in per]))})
    _write_rows(out / "budget_sweep.csv", BUDGET_COLUMNS, rows, meta)
    _write_rows(out / "budget_summary.csv", BUDGET_SUMMARY_COLUMNS, summary, meta)
    from .plots import plot_budget
    _plot(plot_budget, out / "budget_summary.csv", out / "budget_sweep.svg")
    print(f"wrote {out / 'budget_sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_ablate(args) -> int:
    model, cfg, digest = _load(args)
    axes = ("shield", "ns") if args.axis == "all" else (args.axis,)
    if "ns" in axes and model.cfg.discrete:
        raise CliError("the N_s sweep needs a continuous action space; discrete actions are fully enumerated")
    out = _out(args)
    write_resolved(cfg, out)
    meta = _meta("ablate", cfg, digest)
    tasks = eval_tasks(cfg, cfg.eval_tasks, cfg.alpha_test, cfg.seed)
    deltas = draw_budgets(*cfg.budget_bounds, len(tasks), cfg.seed)
    from .plots import plot_adaptation
    digests = {}
    for axis in axes:
        if axis == "shield":
            variants = [("soft", "soft", cfg.n_samples), ("hard", "hard", cfg.n_samples)]
        else:
            variants = [(f"ns{n}", cfg.shield, int(n)) for n in cfg.ns_grid]
        sub = out / f"ablate_{axis}"
        rows = _run_variants(model, cfg, variants, tasks, deltas, sub, {**meta, "axis": axis}, cfg.alpha_test)
        _write_rows(out / f"ablate_{axis}.csv", ADAPT_COLUMNS, rows, {**meta, "axis": axis})
        _write_rows(out / f"ablate_{axis}_summary.csv", ADAPT_SUMMARY_COLUMNS, _adapt_summary(rows),
                    {**meta, "axis": axis})
        _plot(plot_adaptation, out / f"ablate_{axis}_summary.csv", out / f"ablate_{axis}.svg")
        for name, _, _ in variants:
            digests[f"{axis}/{name}"] = _file_digest(sub / "logs" / name / "decisions.csv")
    (out / "decision_digests.json").write_text(json.dumps(digests, indent=1, sort_keys=True))
    print(json.dumps(digests, indent=1, sort_keys=True))
    return 0


def cmd_diagnose(args) -> int:
    model, cfg, digest = _load(args)
    out = _out(args)
    write_resolved(cfg, out)
    meta = _meta("diagnose", cfg, digest)
    if args.log:
        try:
            logs, rows = read_run_logs(args.log)
        except (FileNotFoundError, ValueError) as exc:
            raise CliError(f"incomplete log: {exc}") from exc
    else:
        tasks = eval_tasks(cfg, args.tasks or cfg.diag_tasks, cfg.alpha_test, cfg.seed)
        deltas = draw_budgets(*cfg.budget_bounds, len(tasks), cfg.seed)
        logs = evaluate(model, tasks, cfg.eval_episodes, deltas, cfg.shield, cfg.n_samples, cfg.temperature,
                        _budget_scale(cfg), cfg.seed)
        write_run_logs(out / "logs", logs, meta)
        logs, rows = read_run_logs(out / "logs")
    bad_budget = check_budget_identity(rows, {lg.context_id: lg.delta for lg in logs})
    for i in bad_budget:
        print(f"budget identity failure at trajectory row {i}", file=sys.stderr)
    try:
        records = diagnose(logs, model)
    except MissingDecisions as exc:
        raise CliError(f"diagnostics refused: {exc}") from exc
    verdict = check_margin_propagation(records)
    reports = episode_reports(records, logs)
    bound_fail = check_episode_bound(reports)
    overlap = check_overlap(logs, model, cfg.overlap_eta)
    summary = summarize(records)
    write_diagnostics_csv(out / "diagnostics.csv", records, meta)
    write_summary_csv(out / "diag_summary.csv", summary, meta)
    verdicts = {
        "transitions": len(records), "verdicts": verdict.n,
        "margin_identity_failures": len(verdict.identity_failures),
        "margin_inequality_failures": len(verdict.inequality_failures),
        "max_identity_residual": verdict.max_residual,
        "episodes": len(reports), "episode_bound_failures": len(bound_fail),
        "min_episode_slack": min((r.slack for r in reports), default=math.nan),
        "overlap_pairs": overlap.n_pairs, "overlap_applicable": overlap.n_applicable,
        "overlap_failures": len(overlap.failures), "budget_identity_failures": bad_budget,
    }
    (out / "verdicts.json").write_text(json.dumps(verdicts, indent=1))
    print(json.dumps(verdicts, indent=1))
    failed = (not verdict.ok) or bound_fail or overlap.failures or bad_budget
    return 1 if failed else 0


def cmd_spawn_check(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    write_resolved(cfg, out)
    meta = _meta("spawn-check", cfg)
    alphas = [args.alpha] if args.alpha is not None else [cfg.alpha_train, 0.0, cfg.alpha_test]
    n = args.tasks or 100_000
    rows, tvs = [], {}
    start = (cfg.grid_size // 2, cfg.grid_size // 2)
    for i, alpha in enumerate(alphas):
        cells, probs = spawn_law(cfg.grid_size, alpha, exclude=[start])
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        idx = {c: j for j, c in enumerate(cells)}
        counts = np.zeros(len(cells))
        for c in draw_cells(cells, probs, n, rng):
            counts[idx[c]] += 1
        emp = counts / n
        tvs[alpha] = float(0.5 * np.abs(emp - probs).sum())
        rows += [{"alpha": alpha, "row": c[0], "col": c[1], "analytic": p, "empirical": e}
                 for c, p, e in zip(cells, probs, emp)]
    _write_rows(out / "spawn_check.csv", ["alpha", "row", "col", "analytic", "empirical"], rows,
                {**meta, "samples": n, **{f"tv[{a}]": v for a, v in tvs.items()}})
    for a, v in tvs.items():
        print(f"alpha={a:+g} samples={n} TV={v:.5f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbarrier", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--seed", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint directory")
        return sp

    def evalflags(sp):
        sp.add_argument("--shield", choices=["off", "soft", "hard"])
        sp.add_argument("--ns", type=int, help="candidate samples per decision (continuous actions)")
        sp.add_argument("--alpha", type=float, help="spawn exponent for evaluation tasks")
        sp.add_argument("--budget-grid", help="comma-separated budgets")
        sp.add_argument("--tasks", type=int)
        sp.add_argument("--episodes", type=int, help="in-context episodes K")
        return sp

    t = common(sub.add_parser("train", help="train a model (resume with --checkpoint)"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)
    evalflags(common(sub.add_parser("eval-adapt", help="per-episode return/cost over K in-context episodes"))
              ).set_defaults(func=cmd_eval_adapt)
    evalflags(common(sub.add_parser("eval-budget", help="sweep the budget grid"))).set_defaults(func=cmd_eval_budget)
    a = evalflags(common(sub.add_parser("ablate", help="soft vs hard shield and candidate-count sweeps")))
    a.add_argument("--axis", choices=["shield", "ns", "all"], default="all")
    a.set_defaults(func=cmd_ablate)
    d = evalflags(common(sub.add_parser("diagnose", help="diagnostics and margin checks on shielded rollouts")))
    d.add_argument("--log", help="run-log directory from a previous evaluation (default: fresh rollouts)")
    d.set_defaults(func=cmd_diagnose)
    s = common(sub.add_parser("spawn-check", help="empirical vs analytic spawn law"), checkpoint=False)
    s.add_argument("--alpha", type=float)
    s.add_argument("--tasks", type=int, help="number of spawn draws (default 100000)")
    s.set_defaults(func=cmd_spawn_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
