import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gradcheck import max_relative_error, perturbed_params, random_batch
from sbp import autograd as ag
from sbp.data import NoiseSpec, SynthConfig, gen_synthetic, make_windows, split_and_window
from sbp.distributions import BinnedDistribution, GeneralizedPareto, splice
from sbp.evt import fit_gpd_mle
from sbp.rng import CounterRNG
from sbp.tcn import (
    MAGIC,
    PointModel,
    SbpModel,
    Standardizer,
    TcnConfig,
    TrainConfig,
    TrainingError,
    _fit,
    backward,
    forward,
    heads_to_distribution,
    init_params,
    load_model,
    loss,
    point_forecast_train,
    read_tensors,
    save_model,
    sbp_nll,
    train,
    write_tensors,
)

SMALL = TcnConfig(context_length=16, channels=8, dilations=(1, 2, 4), n_bins=50, seed=3)


# -- configuration and forward -------------------------------------------------


def test_receptive_field():
    assert TcnConfig().receptive_field == 16
    assert TcnConfig().blocks() == [(1, 2), (4, 8)]
    with pytest.raises(ValueError):
        TcnConfig(context_length=8, dilations=(1, 2, 4, 8))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tail_mass=0.5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_output_shape():
    cfg = TcnConfig(n_bins=20)
    p = init_params(cfg, cfg.n_bins + 4)
    w = CounterRNG(1).normal(64)
    assert forward(p, w, cfg).shape == (24,)
    assert forward(p, np.stack([w, w, w]), cfg).shape == (3, 24)
    with pytest.raises(ValueError):
        forward(p, w[:-1], cfg)


def test_zero_weights_zero_output():
    cfg = TcnConfig(n_bins=10)
    p = OrderedDict((k, np.zeros_like(v)) for k, v in init_params(cfg, 14).items())
    np.testing.assert_array_equal(forward(p, CounterRNG(2).normal(64), cfg), np.zeros(14))


def test_causality():
    cfg = TcnConfig(context_length=40, dilations=(1, 2, 4, 8), n_bins=10)
    p = init_params(cfg, 14)
    base = CounterRNG(3).normal(40)
    outside = base.copy()
    outside[: 40 - cfg.receptive_field] = CounterRNG(4).normal(40 - cfg.receptive_field) * 100
    np.testing.assert_array_equal(forward(p, base, cfg), forward(p, outside, cfg))
    inside = base.copy()
    inside[40 - cfg.receptive_field] += 1.0
    assert not np.array_equal(forward(p, base, cfg), forward(p, inside, cfg))


def test_init_deterministic_and_glorot():
    a, b = init_params(SMALL, 54), init_params(SMALL, 54)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    w = a["block0.conv1.weight"]
    assert np.abs(w).max() <= math.sqrt(6.0 / (8 * 2 + 8 * 2))
    assert not np.array_equal(a["head.weight"], init_params(TcnConfig(**{**SMALL.__dict__, "seed": 4}), 54)["head.weight"])


# -- heads and loss ------------------------------------------------------------


EDGES = np.linspace(-2.0, 2.0, 9)


def test_uniform_bins():
    d = heads_to_distribution(np.zeros(12), EDGES, 0.05)
    np.testing.assert_allclose(d.base.probs, np.full(8, 1 / 8))


def test_tail_heads_at_zero():
    d = heads_to_distribution(np.zeros(12), EDGES, 0.05)
    for g in (d.lower, d.upper):
        assert g.xi == pytest.approx(math.log(2.0) + 1e-6, abs=1e-15)
        assert g.beta == pytest.approx(0.6931, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=12, max_size=12))
def test_heads_always_valid(raw):
    d = heads_to_distribution(np.array(raw), EDGES, 0.05)
    for g in (d.lower, d.upper):
        assert g.xi > 0 and g.beta > 0
    assert d.tau_lower < d.tau_upper
    assert d.cdf(d.tau_upper) == pytest.approx(0.95, abs=1e-9)


def test_loss_inside_base():
    d = heads_to_distribution(np.linspace(-1, 1, 12), EDGES, 0.05)
    x = 0.5 * (d.tau_lower + d.tau_upper)
    assert loss(d, x) == pytest.approx(-d.base.log_prob(x), abs=1e-12)


def test_loss_upper_tail_exponential():
    base = BinnedDistribution.from_probs(EDGES, np.full(8, 1 / 8))
    d = splice(base, GeneralizedPareto(0.2, 1.0), GeneralizedPareto(0.0, 1.0), 0.05)
    x = d.tau_upper + 1.0
    assert loss(d, x) == pytest.approx(-d.base.log_prob(x) + 1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_loss_finite(x):
    d = heads_to_distribution(np.linspace(-3, 3, 12), EDGES, 0.05)
    assert math.isfinite(loss(d, x))


def test_batched_loss_matches_single():
    rng = np.random.default_rng(5)
    raw = rng.standard_normal((30, 12)) * 2
    y = rng.standard_normal(30) * 2.5
    batched = float(sbp_nll(ag.Tensor(raw), y, EDGES, 0.05).data)
    single = np.mean([loss(heads_to_distribution(r, EDGES, 0.05), v) for r, v in zip(raw, y)])
    assert batched == pytest.approx(single, rel=1e-10)


# -- gradients -----------------------------------------------------------------


def test_gradients_two_layer():
    cfg = TcnConfig(context_length=6, channels=3, kernel_size=2, dilations=(1, 2), n_bins=5, seed=1)
    rng = np.random.default_rng(11)
    p = perturbed_params(cfg, rng)
    w, y = random_batch(cfg, rng)
    assert max_relative_error(p, w, y, cfg, np.linspace(-3, 3, 6), 0.1) < 1e-4


def test_saturated_bin_has_no_gradient():
    cfg = TcnConfig(context_length=4, channels=2, dilations=(1, 2), n_bins=8, seed=0)
    p = OrderedDict((k, np.zeros_like(v)) for k, v in init_params(cfg, 12).items())
    p["head.bias"][3] = 60.0  # bin 3 holds all but the floor mass
    w = np.zeros((5, 4))
    y = np.full(5, -0.25)  # inside bin 3 of EDGES
    _, g = backward(p, w, y, cfg, EDGES, 0.05)
    assert np.abs(g["head.bias"][:8]).max() < 1e-8


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(12)
    cfg = TcnConfig(context_length=8, channels=3, dilations=(1, 2, 4), n_bins=8, seed=2)
    p = perturbed_params(cfg, rng)
    w, y = random_batch(cfg, rng, 7)
    l1, g1 = backward(p, w, y, cfg, EDGES, 0.05)
    l2, g2 = backward(p, np.concatenate([w, w]), np.concatenate([y, y]), cfg, EDGES, 0.05)
    assert l1 == pytest.approx(l2, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-11, atol=1e-14)


# -- training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def normal_run():
    x = CounterRNG(4).normal(3000)
    model, log = train(x, SMALL, TrainConfig(epochs=20))
    return x, model, log


def test_normal_matches_exact_bin_oracle(normal_run):
    x, model, log = normal_run
    ws = make_windows(x, SMALL.context_length, 0, x.size)
    n_val = int(round(len(ws) * 0.1))
    z = model.standardizer.transform(ws.targets[len(ws) - n_val :])
    std = model.standardizer
    # exact bin masses of the true N(0, 1) law in standardised units
    cdf = stats.norm.cdf(model.edges * std.scale + std.centre)
    base = BinnedDistribution.from_probs(model.edges, np.diff(cdf))
    q = model.q
    tau_lo, tau_up = float(base.icdf(q)), float(base.icdf(1 - q))
    # best GPD tails for the true law, fitted on a large exact sample
    draws = std.transform(stats.norm.ppf(CounterRNG(99).random(400_000)))
    up = fit_gpd_mle(draws[draws >= tau_up] - tau_up)
    lo = fit_gpd_mle(tau_lo - draws[draws <= tau_lo])
    terms = base.log_prob(z)
    terms = terms + np.where(z >= tau_up, up.log_pdf(np.maximum(z - tau_up, 0.0)), 0.0)
    terms = terms + np.where(z <= tau_lo, lo.log_pdf(np.maximum(tau_lo - z, 0.0)), 0.0)
    oracle = -float(np.mean(terms))
    assert abs(min(log.val_nll) - oracle) <= 0.1


def test_training_log_format(normal_run):
    _, _, log = normal_run
    text = log.to_csv()
    assert text.splitlines()[0] == "epoch,train_nll,val_nll"
    assert len(text.splitlines()) == 21
    assert log.best_epoch == int(np.argmin(log.val_nll))


def test_training_deterministic():
    x = CounterRNG(6).normal(600)
    cfg = TcnConfig(context_length=8, channels=4, dilations=(1, 2), n_bins=10, seed=1)
    a = train(x, cfg, TrainConfig(epochs=3))
    b = train(x, cfg, TrainConfig(epochs=3))
    assert a[1].to_csv() == b[1].to_csv()
    assert save_model(a[0]) == save_model(b[0])


def test_heavy_tail_raises_upper_xi():
    cfg = TcnConfig(context_length=16, channels=8, dilations=(1, 2, 4), n_bins=50, seed=3)
    xis = {}
    for kind, noise in (("t", NoiseSpec("student_t", nu=3, scale=0.3)), ("gauss", NoiseSpec("gaussian", sigma=0.3))):
        frame = gen_synthetic(SynthConfig(length=4000, noise=noise, seed=5))
        split = split_and_window(frame, 0.8, cfg.context_length)
        model, _ = train(frame.values[: split.n_train], cfg, TrainConfig(epochs=15))
        xis[kind] = np.mean([d.upper.xi for d in model.distributions(split.test.contexts)])
    assert xis["t"] > xis["gauss"]


def test_too_short_series():
    with pytest.raises(ValueError):
        train(np.zeros(10), SMALL, TrainConfig(epochs=1))


def test_non_finite_loss_reports_position():
    cfg = TcnConfig(context_length=4, channels=2, dilations=(1, 2), n_bins=4, seed=0)
    p = init_params(cfg, 1)
    ctx = np.zeros((100, 4))
    with pytest.raises(TrainingError) as info:
        _fit(p, ctx, np.zeros(100), cfg, TrainConfig(epochs=2), lambda raw, y: ag.mean(raw * np.nan))
    assert (info.value.epoch, info.value.batch) == (0, 0)


def test_point_forecast_sine():
    frame = gen_synthetic(SynthConfig(length=3000, period=24, noise=NoiseSpec("gaussian", sigma=0.0)))
    cfg = TcnConfig(context_length=16, channels=8, dilations=(1, 2, 4), n_bins=2, seed=2)
    split = split_and_window(frame, 0.8, cfg.context_length)
    model, _ = point_forecast_train(frame.values[: split.n_train], cfg, TrainConfig(epochs=20))
    std = model.standardizer
    err = std.transform(model.forecast(split.test.contexts)) - std.transform(split.test.targets)
    assert np.mean(err**2) < 1e-3


def test_point_forecast_constant():
    cfg = TcnConfig(context_length=8, channels=4, dilations=(1, 2), n_bins=2, seed=2)
    model, _ = point_forecast_train(np.full(800, 4.2), cfg, TrainConfig(epochs=10))
    pred = model.predict(np.full(100, 4.2))
    assert np.all(np.isnan(pred[:8]))
    assert np.mean((pred[8:] - 4.2) ** 2) < 1e-4


def test_standardizer_robust():
    x = np.concatenate([CounterRNG(7).normal(10_000), [1e6]])
    s = Standardizer.fit(x)
    assert abs(s.centre) < 0.05 and abs(s.scale - 1.0) < 0.05
    np.testing.assert_allclose(s.inverse(s.transform(x)), x)


# -- container -----------------------------------------------------------------


def test_container_layout():
    blob = write_tensors(OrderedDict([("a", np.arange(6.0).reshape(2, 3))]))
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1 and blob[12:13] == b"a"
    assert len(blob) == 4 + 4 + 4 + 1 + 4 + 16 + 48
    out = read_tensors(blob)
    np.testing.assert_array_equal(out["a"], np.arange(6.0).reshape(2, 3))


def test_container_rejects_garbage():
    with pytest.raises(ValueError):
        read_tensors(b"NOPE" + bytes(8))


def test_model_roundtrip(normal_run):
    x, model, _ = normal_run
    again = load_model(save_model(model))
    assert isinstance(again, SbpModel)
    assert again.cfg == model.cfg and again.q == model.q
    w = make_windows(x, 16, 0, 200).contexts
    np.testing.assert_array_equal(again.quantiles(w, [0.1, 0.9]), model.quantiles(w, [0.1, 0.9]))
    assert save_model(again) == save_model(model)


def test_point_model_roundtrip_large_seed():
    cfg = TcnConfig(context_length=4, channels=2, dilations=(1, 2), n_bins=2, seed=2**64 - 3)
    model = PointModel(init_params(cfg, 1), cfg, Standardizer(1.0, 2.0))
    again = load_model(save_model(model))
    assert isinstance(again, PointModel) and again.cfg.seed == 2**64 - 3
