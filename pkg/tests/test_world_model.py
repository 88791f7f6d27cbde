import math

import numpy as np
import pytest

from qbarrier import gradnet as gn
from qbarrier.codec import ModelHealthError
from qbarrier.world_model import (HALF_LOG_2PI, LOG_STD_MAX, LOG_STD_MIN, conjugacy_loss, distill_loss, f_z, predict,
                                  wm_loss)
from helpers import fd_gradient, names_with, relative_error, tiny_model

RNG = np.random.default_rng(11)


def _zero_wm(model):
    p = model.params
    for n in names_with(p, "wm"):
        if ".W" in n and n.endswith(str(model.wm_spec.n_layers - 1)):
            p[n] = np.zeros_like(p[n])


def test_zero_last_layer_gives_bias_image():
    model = tiny_model()
    _zero_wm(model)
    d = model.cfg.d_m
    b = model.params["wm.b1"]
    pred = predict(model, RNG.normal(size=d), model.embed_action(2))
    np.testing.assert_allclose(pred.mean, b[:d])
    np.testing.assert_allclose(pred.std, np.exp(np.clip(b[d:2 * d], LOG_STD_MIN, LOG_STD_MAX)))
    assert pred.reward == pytest.approx(b[2 * d]) and pred.cost == pytest.approx(b[2 * d + 1])


def test_log_density_at_mean():
    model = tiny_model()
    pred = predict(model, RNG.normal(size=model.cfg.d_m), model.embed_action(1))
    assert pred.log_density(pred.mean) == pytest.approx(float(np.sum(-pred.log_std - 0.5 * math.log(2 * math.pi))))


def test_std_is_clamped():
    model = tiny_model()
    d = model.cfg.d_m
    b = model.params["wm.b1"].copy()
    b[d:2 * d] = [-50.0, 0.0, 50.0]
    model.params["wm.b1"] = b
    _zero_wm(model)
    pred = predict(model, np.zeros(d), model.embed_action(0))
    np.testing.assert_allclose(pred.std, [1e-3, 1.0, 10.0])


def test_sample_mean_matches_f_z():
    model = tiny_model()
    z, a = RNG.normal(size=model.cfg.d_m), model.embed_action(3)
    pred = predict(model, z, a)
    s = pred.sample(np.random.default_rng(0), n=10_000)
    assert np.all(np.abs(s.mean(axis=0) - f_z(model, z, a)) <= 3 * pred.std / math.sqrt(10_000))


def test_nan_input_raises():
    model = tiny_model()
    with pytest.raises(ModelHealthError):
        predict(model, np.full(model.cfg.d_m, np.nan), model.embed_action(0))


def _batch(model, n=6):
    d = model.cfg.d_m
    return (RNG.normal(size=(n, d)), model.embed_action(RNG.integers(0, 5, size=n)), RNG.normal(size=(n, d)) * 0.3,
            RNG.integers(0, 2, size=n).astype(float), RNG.integers(0, 2, size=n).astype(float))


def test_wm_loss_matches_scalar_recomputation():
    model = tiny_model()
    z, a, z1, r, c = _batch(model)
    tape = gn.Tape()
    val = float(wm_loss(tape, model, tape.constant(z), a, z1, r, c).value)
    terms = []
    for i in range(len(r)):
        p = predict(model, z[i], a[i])
        nll = sum(p.log_std[j] + HALF_LOG_2PI + 0.5 * ((z1[i, j] - p.mean[j]) / p.std[j]) ** 2
                  for j in range(model.cfg.d_m))
        terms.append((nll, (p.reward - r[i]) ** 2, (p.cost - c[i]) ** 2))
    expected = sum(math.fsum(t[k] for t in terms) / len(terms) for k in range(3))
    assert val == pytest.approx(expected, rel=1e-12)


def test_wm_reward_term_example():
    # R_hat = 0 with half the rewards equal to 1 -> reward term 0.5
    model = tiny_model()
    _zero_wm(model)
    d = model.cfg.d_m
    b = model.params["wm.b1"].copy()
    b[2 * d:] = 0.0
    model.params["wm.b1"] = b
    z = np.zeros((4, d))
    a = model.embed_action([0, 1, 2, 3])
    target = np.tile(b[:d], (4, 1))
    tape = gn.Tape()
    loss = wm_loss(tape, model, tape.constant(z), a, target, np.array([0, 1, 0, 1.0]), np.zeros(4))
    nll = float(np.sum(np.clip(b[d:2 * d], LOG_STD_MIN, LOG_STD_MAX) + HALF_LOG_2PI))
    assert float(loss.value) == pytest.approx(nll + 0.5, rel=1e-12)


def test_wm_loss_gradient_matches_finite_differences():
    model = tiny_model()
    z, a, z1, r, c = _batch(model, 5)
    names = names_with(model.params, "wm")

    def value():
        tape = gn.Tape()
        return float(wm_loss(tape, model, tape.constant(z), a, z1, r, c).value)

    tape = gn.Tape()
    g = gn.backward(tape, wm_loss(tape, model, tape.constant(z), a, z1, r, c), params=model.params)
    assert relative_error(g, fd_gradient(value, model.params, names)) < 1e-6


def test_wm_loss_empty_batch():
    model = tiny_model()
    tape = gn.Tape()
    with pytest.raises(ValueError):
        wm_loss(tape, model, tape.constant(np.zeros((0, model.cfg.d_m))), np.zeros((0, 5)), np.zeros((0, 3)),
                np.zeros(0), np.zeros(0))


def _copy_heads(model):
    for n in names_with(model.params, "wproj"):
        model.params[n.replace("wproj", "pproj")] = model.params[n].copy()


def test_alignment_losses_zero_under_equal_heads():
    model = tiny_model()
    _copy_heads(model)
    z0, z1 = RNG.normal(size=(4, model.cfg.d_z)), RNG.normal(size=(4, model.cfg.d_z))
    tape = gn.Tape()
    assert float(distill_loss(tape, model, tape.constant(z0)).value) == 0.0
    assert float(conjugacy_loss(tape, model, tape.constant(z0), tape.constant(z1)).value) == 0.0


def test_conjugacy_zero_when_latent_static():
    model = tiny_model()
    z = RNG.normal(size=(3, model.cfg.d_z))
    tape = gn.Tape()
    assert float(conjugacy_loss(tape, model, tape.constant(z), tape.constant(z)).value) == 0.0


def test_alignment_losses_match_hand_expansion():
    model = tiny_model()
    z0, z1 = RNG.normal(size=(4, model.cfg.d_z)), RNG.normal(size=(4, model.cfg.d_z))
    P = lambda z: np.tanh(z @ model.params["pproj.W0"] + model.params["pproj.b0"])  # noqa: E731
    W = lambda z: np.tanh(z @ model.params["wproj.W0"] + model.params["wproj.b0"])  # noqa: E731
    tape = gn.Tape()
    d = float(distill_loss(tape, model, tape.constant(z0)).value)
    cj = float(conjugacy_loss(tape, model, tape.constant(z0), tape.constant(z1)).value)
    assert d == pytest.approx(np.mean(np.sum((P(z0) - W(z0)) ** 2, axis=1)), rel=1e-12)
    assert cj == pytest.approx(np.mean(np.sum(((P(z1) - P(z0)) - (W(z1) - W(z0))) ** 2, axis=1)), rel=1e-12)
    assert d >= 0 and cj >= 0
