from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbarrier import gradnet as gn
from qbarrier.cmdp import run_context, sample_task
from qbarrier.codec import (ContextWindow, ModelHealthError, embed_entry, encode, encode_detached, encode_on_tape,
                            encoder_input, project, window_from_entries, window_from_history)
from qbarrier.model import QBarrierModel, config_for_task
from qbarrier.rollout import Agent
from helpers import random_window, tiny_config, tiny_model

GOLDEN = Path(__file__).parent / "data" / "golden_latents.npz"


def golden_inputs():
    cfg = config_for_task("gridworld")
    model = QBarrierModel.init(cfg, seed=0)
    rng = np.random.default_rng(2024)
    return model, random_window(cfg, 3, rng)


def test_golden_latents():
    model, w = golden_inputs()
    lat = encode(model, w)
    ref = np.load(GOLDEN)
    for k in ("z", "z_w", "z_p"):
        np.testing.assert_allclose(getattr(lat, k), ref[k], rtol=0, atol=1e-12)


def test_window_padding_and_order():
    cfg = tiny_config(window=3)
    rows = np.arange(2 * cfg.entry_dim, dtype=float).reshape(2, cfg.entry_dim)
    w = window_from_entries(cfg, rows, [0.1, 0.2])
    assert w.entries.shape == (3, cfg.entry_dim)
    np.testing.assert_array_equal(w.mask, [0, 1, 1])
    np.testing.assert_array_equal(w.entries[1:], rows)
    assert np.all(w.entries[0] == 0)
    long = np.arange(5 * cfg.entry_dim, dtype=float).reshape(5, cfg.entry_dim)
    w = window_from_entries(cfg, long, [0.1, 0.2])
    np.testing.assert_array_equal(w.entries, long[-3:])
    np.testing.assert_array_equal(w.mask, [1, 1, 1])


def test_entry_layout():
    cfg = config_for_task("gridworld")
    e = embed_entry(cfg, [0.25, 0.5], 3, 1.0, 0.0, True)
    np.testing.assert_array_equal(e, [0.25, 0.5, 0, 0, 0, 1, 0, 1.0, 0.0, 1.0])
    cv = config_for_task("velocity")
    np.testing.assert_array_equal(embed_entry(cv, [0.5], np.array([-0.3]), -1.0, 0.25, False), [0.5, -0.3, -1.0, 0.25, 0])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_masked_slots_do_not_matter(seed):
    model = tiny_model(window=4)
    rng = np.random.default_rng(seed)
    w = random_window(model.cfg, 1, rng)
    w2 = ContextWindow(w.entries.copy(), w.mask, w.obs)
    w2.entries[w.mask == 0] = rng.normal(size=(int((w.mask == 0).sum()), model.cfg.entry_dim)) * 100
    a, b = encode(model, w), encode(model, w2)
    for k in ("z", "z_w", "z_p"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_zero_final_layers_give_bias_image():
    model = tiny_model()
    p = model.params
    for prefix in ("enc", "wproj", "pproj"):
        last = model.enc_spec.n_layers - 1 if prefix == "enc" else 0
        p[f"{prefix}.W{last}"] = np.zeros_like(p[f"{prefix}.W{last}"])
    cfg = model.cfg
    w = window_from_entries(cfg, np.zeros((0, cfg.entry_dim)), np.zeros(cfg.obs_dim))
    lat = encode(model, w)
    np.testing.assert_allclose(lat.z, np.tanh(p["enc.b1"]))
    np.testing.assert_allclose(lat.z_w, np.tanh(p["wproj.b0"]))
    np.testing.assert_allclose(lat.z_p, np.tanh(p["pproj.b0"]))


def test_views_come_from_the_same_shared_latent():
    model = tiny_model()
    w = random_window(model.cfg, 5, np.random.default_rng(1))
    lat = encode(model, w)
    zw, zp = project(model, lat.z)
    np.testing.assert_array_equal(zw, lat.z_w)
    np.testing.assert_array_equal(zp, lat.z_p)
    assert lat.z.shape == (5, model.cfg.d_z) and lat.z_w.shape == (5, model.cfg.d_m)


def test_tape_encoding_matches_numpy_and_detached_blocks_encoder():
    model = tiny_model()
    w = random_window(model.cfg, 4, np.random.default_rng(3))
    ref = encode(model, w)
    for detached in (False, True):
        tape = gn.Tape()
        lat = encode_on_tape(tape, model, w, detached=detached)
        for k in ("z", "z_w", "z_p"):
            np.testing.assert_allclose(getattr(lat, k).value, getattr(ref, k), rtol=1e-14)
    tape = gn.Tape()
    lat = encode_detached(tape, model, w)
    g = gn.backward(tape, gn.sum(lat.z_w) + gn.sum(lat.z_p), params=model.params)
    assert all(np.all(g[n] == 0.0) for n in model.params.names() if n.startswith("enc."))
    assert any(np.any(g[n] != 0.0) for n in model.params.names() if n.startswith("wproj."))


def test_bad_window_shape_and_nan():
    model = tiny_model()
    w = random_window(model.cfg, 1, np.random.default_rng(0))
    with pytest.raises(gn.ConfigurationError):
        encoder_input(model.cfg, ContextWindow(w.entries[:, :1], w.mask[:, :1], w.obs))
    w.obs[0, 0] = np.nan
    with pytest.raises(ModelHealthError):
        encode(model, w)


def test_budget_feature_changes_input():
    model = tiny_model(budget_feature=True)
    cfg = model.cfg
    assert cfg.encoder_in == cfg.window * cfg.entry_dim + cfg.window + cfg.obs_dim + 1
    a = window_from_entries(cfg, np.zeros((0, cfg.entry_dim)), np.zeros(2), extra=[0.2])
    b = window_from_entries(cfg, np.zeros((0, cfg.entry_dim)), np.zeros(2), extra=[0.8])
    assert not np.allclose(encode(model, a).z, encode(model, b).z)


def test_agent_window_cache_matches_history_window():
    model = tiny_model(window=3)
    task = sample_task("gridworld", 0.5, 5, 4, seed=2)
    agent = Agent(model, "base")
    captured = []

    def pol(history, obs, budget, rng):
        captured.append((list(history), obs, agent._window(history, obs)))
        return agent(history, obs, budget, rng)

    run_context(pol, task, 2, 6, 1.0, np.random.default_rng(0))
    for history, obs, w in captured:
        ref = window_from_history(model.cfg, history, obs)
        np.testing.assert_array_equal(w.entries, ref.entries)
        np.testing.assert_array_equal(w.mask, ref.mask)
