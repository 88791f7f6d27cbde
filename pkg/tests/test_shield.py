import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbarrier.codec import ModelHealthError
from qbarrier.shield import (CandidateSet, barriers, hard_shield, read_decisions_csv, select_action,
                             shield_distribution, soft_shield, write_decisions_csv)
from helpers import random_window, tiny_model


def brute_soft(rho, q, B, beta=1.0):
    w = [r * math.exp(-beta * max(qi - B, 0.0)) for r, qi in zip(rho, q)]
    s = math.fsum(w)
    return [x / s for x in w]


def brute_hard(rho, q, B, tol=1e-9):
    safe = [r if B - qi >= 0 else 0.0 for r, qi in zip(rho, q)]
    s = math.fsum(safe)
    if s > 0:
        return [x / s for x in safe], False
    m = min(q)
    ties = [i for i, qi in enumerate(q) if qi - m <= tol]
    return [1.0 / len(ties) if i in ties else 0.0 for i in range(len(q))], True


def test_barrier_examples():
    b_v, b_q = barriers([2.0, 4.0], 3.0)
    assert b_v == 1.0 and list(b_q) == [1.0, -1.0]
    b_v, b_q = barriers([0.0, 0.0], 0.0)
    assert b_v == 0.0 and list(b_q) == [0.0, 0.0]
    with pytest.raises(ValueError):
        barriers([], 1.0)


def test_soft_examples():
    np.testing.assert_allclose(soft_shield([0.5, 0.5], [0.0, -math.log(2)]), [2 / 3, 1 / 3], rtol=1e-12)
    e = math.exp(-1)
    np.testing.assert_allclose(soft_shield([1, 1, 1], [-1, -1, 0]), np.array([e, e, 1]) / (2 * e + 1), rtol=1e-12)
    np.testing.assert_allclose(soft_shield([0.2, 0.3, 0.5], [0, 1, 2]), [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        soft_shield([0, 0], [1, 1])


def test_hard_examples():
    p, fb, _ = hard_shield([0.2, 0.8], [-1.0, 0.5], [2.0, 0.5])
    np.testing.assert_array_equal(p, [0, 1])
    assert not fb
    p, fb, ties = hard_shield([0.3, 0.3, 0.4], np.array([1.5, 1.5, 1.5]) - [3, 2, 2], [3, 2, 2])
    np.testing.assert_array_equal(p, [0, 0.5, 0.5])
    assert fb and ties == (1, 2)
    p, fb, _ = hard_shield([0.2, 0.3], [1, 1], [0, 0])
    np.testing.assert_allclose(p, [0.4, 0.6])


def test_soft_does_not_underflow_on_huge_penalties():
    p = soft_shield([0.5, 0.5], [-2000.0, -2001.0])
    assert np.all(p > 0) and p.sum() == pytest.approx(1.0)


def test_brute_force_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    fallbacks = ties = 0
    for i in range(1000):
        n = int(rng.integers(1, 17))
        rho = rng.dirichlet(np.ones(n)) if i % 2 else np.ones(n)
        q = rng.uniform(0, 5, size=n)
        if i % 7 == 0:
            q = np.round(q)  # exact ties
        B = float(rng.uniform(-1, 6))
        beta = float(rng.choice([0.5, 1.0, 4.0]))
        cand = CandidateSet(np.arange(n), rho, "enumerated-discrete")
        _, _, soft, _, _ = shield_distribution("soft", cand, q, B, beta)
        _, _, hard, fb, tie = shield_distribution("hard", cand, q, B)
        ref_hard, ref_fb = brute_hard(list(rho), list(q), B)
        worst = max(worst, np.max(np.abs(soft - brute_soft(list(rho), list(q), B, beta))),
                    np.max(np.abs(hard - ref_hard)))
        assert fb == ref_fb
        fallbacks += fb
        ties += len(tie) > 1
    assert worst <= 1e-9
    assert fallbacks > 0 and ties > 0


@given(st.lists(st.floats(0, 5), min_size=1, max_size=16), st.floats(-2, 6))
def test_state_margin_is_max_action_margin(q, B):
    b_v, b_q = barriers(q, B)
    assert b_v == max(b_q)


@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0, 5)), min_size=1, max_size=16), st.floats(-2, 6),
       st.floats(0.1, 5))
def test_soft_support_and_normalization(pairs, B, beta):
    rho, q = map(np.array, zip(*pairs))
    p = shield_distribution("soft", CandidateSet(np.arange(len(q)), rho, "x"), q, B, beta)[2]
    assert np.all(p > 0) and abs(p.sum() - 1) <= 1e-9


@given(st.lists(st.floats(0, 5), min_size=2, max_size=10), st.integers(0, 9), st.floats(0, 2), st.floats(-1, 6))
def test_lowering_one_q_never_lowers_its_soft_prob(q, idx, dq, B):
    idx %= len(q)
    rho = np.ones(len(q))
    q = np.array(q)
    before = soft_shield(rho, B - q)[idx]
    q2 = q.copy()
    q2[idx] -= dq
    assert soft_shield(rho, B - q2)[idx] >= before - 1e-12


@given(st.lists(st.floats(0, 5), min_size=1, max_size=10), st.floats(-1, 6), st.floats(0, 3))
def test_raising_budget_never_shrinks_weights_or_safe_set(q, B, dB):
    q = np.array(q)
    w = lambda b: np.exp(-np.maximum(q - b, 0))  # noqa: E731
    assert np.all(w(B + dB) >= w(B))
    assert np.all((B + dB - q >= 0) >= (B - q >= 0))


def test_infinite_budget_proxy_returns_base_policy():
    model = tiny_model()
    w = random_window(model.cfg, 1, np.random.default_rng(0))
    w = type(w)(w.entries[0], w.mask[0], w.obs[0])
    d = select_action(model, w, 1e6, "soft", rng=np.random.default_rng(0))
    np.testing.assert_allclose(d.probs, d.candidates.rho / d.candidates.rho.sum(), rtol=1e-12)
    assert d.candidates.origin == "enumerated-discrete" and len(d.candidates) == 5
    assert abs(d.candidates.rho.sum() - 1) < 1e-12


def test_hard_mode_flags_fallback_and_recomputes():
    model = tiny_model()
    w = random_window(model.cfg, 1, np.random.default_rng(1))
    w = type(w)(w.entries[0], w.mask[0], w.obs[0])
    d = select_action(model, w, -100.0, "hard", rng=np.random.default_rng(0))
    assert d.fallback and d.probs[d.index] > 0
    ref, _ = brute_hard(list(d.candidates.rho), list(d.q_plus), -100.0)
    np.testing.assert_allclose(d.probs, ref, atol=1e-12)
    assert d.b_v == pytest.approx(-100.0 - d.q_plus.min())


def test_continuous_candidates_are_sampled_with_unit_weight():
    model = tiny_model("velocity")
    w = random_window(model.cfg, 1, np.random.default_rng(2))
    w = type(w)(w.entries[0], w.mask[0], w.obs[0])
    d = select_action(model, w, 0.5, "soft", n_samples=6, rng=np.random.default_rng(0))
    assert d.candidates.actions.shape == (6, 1) and np.all(d.candidates.rho == 1)
    np.testing.assert_allclose(d.probs, brute_soft([1] * 6, list(d.q_plus), 0.5), atol=1e-12)
    with pytest.raises(ValueError):
        select_action(model, w, 0.5, "soft", n_samples=0)
    with pytest.raises(ValueError):
        select_action(model, w, 0.5, "gentle")


def test_select_action_leaves_parameters_untouched():
    model = tiny_model()
    before = model.params.digest(), model.target.digest()
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = random_window(model.cfg, 1, rng)
        select_action(model, type(w)(w.entries[0], w.mask[0], w.obs[0]), 0.3, "hard", rng=rng)
    assert (model.params.digest(), model.target.digest()) == before


def test_nan_critic_refuses_to_act():
    model = tiny_model()
    name = [n for n in model.params.names() if n.startswith("qc0.b")][-1]
    model.params._arrays[name] = np.array([np.nan])
    w = random_window(model.cfg, 1, np.random.default_rng(0))
    with pytest.raises(ModelHealthError):
        select_action(model, type(w)(w.entries[0], w.mask[0], w.obs[0]), 1.0)


def test_select_action_draw_frequencies():
    model = tiny_model()
    w = random_window(model.cfg, 1, np.random.default_rng(4))
    w = type(w)(w.entries[0], w.mask[0], w.obs[0])
    rng = np.random.default_rng(1)
    n = 20_000
    picks = [select_action(model, w, 0.0, "soft", rng=rng) for _ in range(n)]
    probs = picks[0].probs
    counts = np.bincount([d.index for d in picks], minlength=len(probs))
    se = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(counts / n - probs) <= 3 * se)


def test_decision_csv_round_trip(tmp_path):
    from qbarrier.cmdp import run_context, sample_task
    from qbarrier.rollout import Agent
    model = tiny_model()
    log = run_context(Agent(model, "soft"), sample_task("gridworld", 0.5, 5, 4, seed=0), 2, 5, 1.0,
                      np.random.default_rng(0))
    write_decisions_csv(tmp_path / "d.csv", [log], {"schema_version": 1})
    back = read_decisions_csv(tmp_path / "d.csv")
    assert len(back) == len(log.transitions())
    for tr in log.transitions():
        d = back[(log.context_id, tr.episode, tr.t)]
        np.testing.assert_array_equal(d.q_plus, tr.decision.q_plus)
        np.testing.assert_array_equal(d.probs, tr.decision.probs)
        np.testing.assert_array_equal(d.z_w, tr.decision.z_w)
        assert d.index == tr.decision.index
