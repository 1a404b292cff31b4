import math

import numpy as np
import pytest

from splineconf import gradcore as gc
from splineconf import model as mdl
from splineconf.data import preprocess, synthetic_bimodal
from splineconf.model import ConfigError, HistModel, SplineModel, TrainConfig, TrainingError
from splineconf.spline import density_eval

from oracles import quad_mass


def test_zero_weight_model_is_uniform():
    for K in (2, 11):
        d = mdl.spline_forward(SplineModel(3, 1, K, zero=True), np.ones(3))
        np.testing.assert_allclose(density_eval(d, np.linspace(0, 1, 17)), 1.0, atol=1e-12)
        flat = mdl.spline_forward(SplineModel(3, 1, K, eps=0.0, zero=True), np.ones(3))
        np.testing.assert_allclose(np.diff(flat.positions), 1 / (K - 1), atol=1e-15)


@pytest.mark.parametrize("degree", [1, 2])
def test_random_model_density_integrates_to_one(degree):
    model = SplineModel(2, degree, 21, seed=7)
    for x in np.random.default_rng(0).normal(size=(5, 2)) * 3:
        assert abs(quad_mass(model.density(x)) - 1) < 1e-8


def test_nll_examples():
    uniform = SplineModel(1, 1, 11, zero=True)
    assert mdl.nll_loss(uniform, [[0.3]], [0.42]) == pytest.approx(0, abs=1e-12)
    # triangle: two segments, peak height 2 at y = 0.5
    tri = SplineModel(1, 1, 3, eps=0.0, zero=True)
    tri.params["height.b"].value[:] = [-50.0, math.log(math.e ** 2 - 1), -50.0]
    assert mdl.nll_loss(tri, [[0.0]], [0.5]) == pytest.approx(-math.log(2), abs=1e-9)


def test_nll_of_density_one_over_e():
    # heights (1, r): density(0) = 2 / (1 + r), which is 1/e for r = 2e - 1
    model = SplineModel(1, 1, 2, eps=0.0, zero=True)
    r = 2 * math.e - 1
    model.params["height.b"].value[:] = [math.log(math.e - 1), math.log(math.exp(r) - 1)]
    d = model.density([0.0])
    assert density_eval(d, 0.0) == pytest.approx(1 / math.e, rel=1e-12)
    assert mdl.nll_loss(model, [[0.0]], [0.0]) == pytest.approx(1.0, abs=1e-12)


def test_degree_two_midpoints_start_near_linear_interpolant():
    model = SplineModel(1, 2, 11, seed=0)
    d = model.density([0.2])
    lin = 0.5 * (d.heights[:-1] + d.heights[1:])
    assert np.max(np.abs(d.mid_heights - lin)) < 0.5


def test_hist_probabilities():
    zero = HistModel(2, 7, zero=True)
    np.testing.assert_allclose(mdl.hist_forward(zero, [1.0, -1.0]), 1 / 7, atol=1e-15)
    two = HistModel(1, 2, zero=True)
    two.params["cls.b"].value[:] = [math.log(3), 0.0]
    np.testing.assert_allclose(mdl.hist_forward(two, [0.5]), [0.75, 0.25], atol=1e-15)
    p = HistModel(3, 21, seed=4).probabilities(np.random.default_rng(1).normal(size=(50, 3)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_discretize_examples():
    assert mdl.discretize([0.0, 1.0, 0.35], 10, 0.0, 1.0).tolist() == [0, 9, 3]
    assert mdl.discretize([2.0], 4, 2.0, 6.0).tolist() == [0]
    with pytest.raises(ConfigError):
        mdl.discretize([0.5], 4, 1.0, 1.0)
    with pytest.raises(ConfigError):
        mdl.discretize([0.5], 1, 0.0, 1.0)


def test_config_errors():
    with pytest.raises(ConfigError):
        SplineModel(1, 1, 1)
    with pytest.raises(ConfigError):
        SplineModel(1, 3, 11)
    with pytest.raises(ConfigError):
        SplineModel(1, 1, 11, eps=0.1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)


# optimizer pieces ------------------------------------------------------------

def _store(value):
    s = gc.ParamStore()
    s.add("w", np.array([value], dtype=float))
    return s


def test_adamw_examples():
    s = _store(0.7)
    mdl.adamw_step(s, {"w": np.zeros(1)}, 0.1, 0.0)
    assert s["w"].value[0] == 0.7
    s = _store(0.0)
    mdl.adamw_step(s, {"w": np.ones(1)}, 0.1, 0.0)
    assert s["w"].value[0] == pytest.approx(-0.1, rel=1e-6)
    s = _store(1.0)
    mdl.adamw_step(s, {"w": np.zeros(1)}, 0.1, 1e-4)
    assert s["w"].value[0] == pytest.approx(1 - 1e-5, abs=1e-15)


def test_adamw_rejects_nonfinite_gradient():
    with pytest.raises(TrainingError):
        mdl.adamw_step(_store(0.0), {"w": np.array([np.nan])}, 0.1, 0.0)


def test_cosine_examples():
    assert mdl.cosine_lr(0, 100, 0.5) == 0.5
    assert mdl.cosine_lr(100, 100, 0.5) == pytest.approx(0, abs=1e-17)
    assert mdl.cosine_lr(50, 100, 0.5) == pytest.approx(0.25)


def test_clip_examples():
    g = {"a": np.array([3.0 / math.sqrt(2)] * 2)}
    assert mdl.clip_gradients(g) is g
    np.testing.assert_allclose(mdl.clip_gradients({"a": np.array([10.0])})["a"], [5.0])
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = mdl.clip_gradients(g)
    assert out["a"][0] == 3.0 and out["b"][0] == 4.0


# training ----------------------------------------------------------------------

def _toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 1))
    y = np.clip(0.5 + 0.2 * X[:, 0] + 0.05 * rng.normal(size=n), 0, 1)
    return X, y


def test_patience_with_constant_validation_loss():
    X, y = _toy()
    model = SplineModel(1, 1, 11, seed=0)
    cfg = TrainConfig(lr=0.0, weight_decay=0.0, max_batches=10_000, seed=0)
    mdl.train(cfg, X, y, X, y, model)
    # 64 rows -> one batch per pass
    assert model.meta["steps"] == 125
    assert model.meta["best_step"] == 0


def test_overfit_small_subset():
    X, y = _toy()
    model = SplineModel(1, 1, 11, seed=1)
    start = mdl.nll_loss(model, X, y)
    cfg = TrainConfig(lr=5e-3, max_batches=2000, patience=10_000, seed=1)
    mdl.train(cfg, X, y, X, y, model)
    # NLL can be negative; require a drop of at least half the initial magnitude
    assert mdl.nll_loss(model, X, y) < start - 0.5 * abs(start)


def test_restored_checkpoint_is_best():
    X, y = _toy(200, 2)
    Xv, yv = _toy(100, 3)
    model = SplineModel(1, 1, 11, seed=2)
    mdl.train(TrainConfig(lr=2e-2, max_batches=300, seed=2), X, y, Xv, yv, model)
    assert model.meta["best_val_loss"] <= model.meta["final_val_loss"]
    restored = mdl.evaluate_loss(model, Xv, yv, 512, 10)
    assert restored == pytest.approx(model.meta["best_val_loss"], abs=1e-12)


def test_training_is_deterministic():
    X, y = _toy(128, 4)
    runs = []
    for _ in range(2):
        model = SplineModel(1, 2, 11, seed=5)
        mdl.train(TrainConfig(lr=1e-2, max_batches=60, seed=5), X, y, X, y, model)
        runs.append((model.meta["best_val_loss"], model.params.flat()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_empty_split_is_config_error():
    X, y = _toy()
    with pytest.raises(ConfigError):
        mdl.train(TrainConfig(), X, y, X[:0], y[:0], SplineModel(1, 1, 11))


@pytest.mark.slow
def test_synthetic_training_beats_uniform():
    b = preprocess(synthetic_bimodal(2000, 0), 0)
    Xt, yt, _ = b.part("train")
    Xv, _, _ = b.part("val")
    yv, _ = b.clamped("val")
    model = mdl.train(TrainConfig(lr=5e-3, seed=0), Xt, yt, Xv, yv, SplineModel(1, 1, 31, seed=0))
    assert model.meta["best_val_loss"] < 0.0


# checkpoints --------------------------------------------------------------------

@pytest.mark.parametrize("make", [lambda: SplineModel(2, 2, 11, seed=3), lambda: HistModel(2, 9, seed=3, lo=-1, hi=2)])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, make):
    model = make()
    model.meta = {"best_val_loss": 0.125}
    path = tmp_path / "ckpt.json"
    mdl.save_checkpoint(model, path, scaler={"y_min": -1.0})
    loaded, record = mdl.load_checkpoint(path)
    assert np.array_equal(loaded.params.flat(), model.params.flat())
    assert loaded.architecture() == model.architecture()
    assert record["scaler"] == {"y_min": -1.0}
    X = np.random.default_rng(0).normal(size=(4, 2))
    assert float(loaded.loss(X, np.full(4, 0.4)).value) == float(model.loss(X, np.full(4, 0.4)).value)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ConfigError):
        mdl.load_checkpoint(p)


def test_batched_losses_match_tape():
    for model in (SplineModel(2, 1, 11, seed=1), SplineModel(2, 2, 11, seed=1), HistModel(2, 5, seed=1)):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(6, 2)), rng.uniform(size=6)
        flats = model.params.flat()[None] + rng.normal(size=(3, model.params.count())) * 0.01
        got = mdl.batched_losses(model, flats, X, y)
        for f, g in zip(flats, got):
            model.params.set_flat(f)
            assert g == pytest.approx(float(model.loss(X, y).value), abs=1e-12)
