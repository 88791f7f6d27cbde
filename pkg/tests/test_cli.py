import csv
import json

import numpy as np
import pytest

from qbarrier import gradnet as gn
from qbarrier.cli import ADAPT_COLUMNS, BUDGET_COLUMNS, main
from qbarrier.config import from_dict
from qbarrier.model import QBarrierModel

TINY = dict(grid_size=5, n_obstacles=2, window=3, d_z=4, d_m=3, hidden=6, n_critics=2, batch_size=8,
            steps_per_epoch=40, batches_per_epoch=2, train_episodes=2, epochs=1, eval_tasks=3, eval_episodes=2,
            diag_tasks=3)


def write_cfg(path, **kw):
    path.write_text(json.dumps({**TINY, **kw}))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        lines = fh.readlines()
    meta = dict(ln[2:].strip().split(": ", 1) for ln in lines if ln.startswith("#"))
    rows = list(csv.DictReader(ln for ln in lines if not ln.startswith("#")))
    return meta, rows


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "grid.json")
    assert main(["train", "--config", cfg, "--out", str(root / "grid")]) == 0
    vcfg = write_cfg(root / "vel.json", env="velocity")
    assert main(["train", "--config", vcfg, "--out", str(root / "vel")]) == 0
    return root


def test_zero_epoch_checkpoint_is_the_initialization(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", epochs=0, seed=3)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    stores, meta = gn.load_checkpoint(tmp_path / "o" / "checkpoint")
    ref = QBarrierModel.init(from_dict({**TINY, "seed": 3}).model_config(), seed=3)
    assert stores["online"].digest() == ref.params.digest()
    assert stores["target"].digest() == ref.target.digest()
    assert meta["epoch"] == 0


def test_same_seed_same_checkpoint_digest(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    digests = []
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        digests.append(gn.checkpoint_digest(tmp_path / name / "checkpoint"))
    assert digests[0] == digests[1]
    meta, rows = read_csv(tmp_path / "a" / "training_log.csv")
    assert meta["checkpoint_digest"] == digests[0] and len(rows) == 1


def test_eval_adapt_schema(trained, tmp_path):
    out = tmp_path / "adapt"
    assert main(["eval-adapt", "--checkpoint", str(trained / "grid" / "checkpoint"), "--out", str(out)]) == 0
    meta, rows = read_csv(out / "adaptation.csv")
    assert list(rows[0]) == ADAPT_COLUMNS
    assert meta["schema_version"] == "1" and meta["command"] == "eval-adapt"
    assert {r["variant"] for r in rows} == {"base", "soft"}
    assert len(rows) == 2 * 3 * 2
    assert (out / "logs" / "soft" / "decisions.csv").exists()


def test_eval_budget_schema(trained, tmp_path):
    out = tmp_path / "bud"
    assert main(["eval-budget", "--checkpoint", str(trained / "grid" / "checkpoint"), "--out", str(out),
                 "--budget-grid", "1,3", "--shield", "hard"]) == 0
    _, rows = read_csv(out / "budget_sweep.csv")
    assert list(rows[0]) == BUDGET_COLUMNS
    assert {(r["variant"], float(r["delta"])) for r in rows} == {(v, d) for v in ("base", "hard") for d in (1, 3)}


def test_ns_sweep_refused_on_discrete(trained, tmp_path, capsys):
    code = main(["ablate", "--axis", "ns", "--checkpoint", str(trained / "grid" / "checkpoint"),
                 "--out", str(tmp_path / "x")])
    assert code == 2 and "continuous" in capsys.readouterr().err


def test_ablation_on_velocity(trained, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--checkpoint", str(trained / "vel" / "checkpoint"), "--out", str(out)]) == 0
    digests = json.loads((out / "decision_digests.json").read_text())
    assert digests["ns/ns4"] != digests["ns/ns32"]
    _, rows = read_csv(out / "ablate_shield.csv")
    assert {r["variant"] for r in rows} == {"soft", "hard"}
    assert all(0.0 <= float(r["fallback_rate"]) <= 1.0 for r in rows)
    _, rows = read_csv(out / "ablate_ns.csv")
    assert sorted({int(r["n_samples"]) for r in rows}) == [4, 8, 16, 32]


def test_config_model_mismatch_refused(trained, tmp_path, capsys):
    bad = write_cfg(tmp_path / "bad.json", d_z=8)
    code = main(["eval-adapt", "--checkpoint", str(trained / "grid" / "checkpoint"), "--config", bad,
                 "--out", str(tmp_path / "x")])
    assert code == 2 and "model layout" in capsys.readouterr().err


def test_unknown_config_key_refused(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"epochz": 3}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "epochz" in capsys.readouterr().err


def test_missing_checkpoint_refused(tmp_path):
    assert main(["eval-adapt", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_diagnose_fresh_and_from_log(trained, tmp_path):
    ck = str(trained / "grid" / "checkpoint")
    out = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", ck, "--out", str(out)]) == 0
    verdicts = json.loads((out / "verdicts.json").read_text())
    assert verdicts["margin_identity_failures"] == 0 and verdicts["episode_bound_failures"] == 0
    assert main(["diagnose", "--checkpoint", ck, "--log", str(out / "logs"), "--out", str(tmp_path / "d2")]) == 0
    _, a = read_csv(out / "diagnostics.csv")
    _, b = read_csv(tmp_path / "d2" / "diagnostics.csv")
    assert a == b


def test_diagnose_reports_corrupted_budget_row(trained, tmp_path, capsys):
    ck = str(trained / "grid" / "checkpoint")
    out = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", ck, "--out", str(out)]) == 0
    path = out / "logs" / "trajectories.csv"
    lines = path.read_text().splitlines(keepends=True)
    header = next(i for i, ln in enumerate(lines) if not ln.startswith("#"))
    target = header + 1 + 4
    cols = lines[header].strip().split(",")
    vals = next(csv.reader([lines[target]]))
    j = cols.index("budget_remaining")
    vals[j] = repr(float(vals[j]) + 0.5)
    lines[target] = ",".join(vals) + "\n"
    path.write_text("".join(lines))
    capsys.readouterr()
    assert main(["diagnose", "--checkpoint", ck, "--log", str(out / "logs"), "--out", str(tmp_path / "d2")]) == 1
    assert "trajectory row 4" in capsys.readouterr().err


def test_diagnose_incomplete_log(trained, tmp_path):
    ck = str(trained / "grid" / "checkpoint")
    out = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", ck, "--out", str(out)]) == 0
    (out / "logs" / "decisions.csv").unlink()
    assert main(["diagnose", "--checkpoint", ck, "--log", str(out / "logs"), "--out", str(tmp_path / "d2")]) == 2


def test_spawn_check_prints_tv(tmp_path, capsys):
    assert main(["spawn-check", "--out", str(tmp_path), "--tasks", "20000"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("alpha=")]
    assert len(lines) == 3
    meta, rows = read_csv(tmp_path / "spawn_check.csv")
    assert len(rows) == 3 * 24
    for a in (-0.5, 0.0, 0.5):
        sub = [r for r in rows if float(r["alpha"]) == a]
        assert sum(float(r["analytic"]) for r in sub) == pytest.approx(1.0)
        assert sum(float(r["empirical"]) for r in sub) == pytest.approx(1.0)
    assert all(np.isfinite(float(v)) for k, v in meta.items() if k.startswith("tv["))
