import json
import math

import numpy as np
import pytest

import zoomroi as z
from zoomroi import regressor
from zoomroi.pyramid import TileAddr
from zoomroi.regressor import (
    MODEL_FORMAT,
    Dataset,
    agreement_rate,
    full_scan_select,
    linear_loss_and_grads,
    load_model_checkpoint,
    mlp_loss_and_grads,
    model_scorer,
    save_model_checkpoint,
    write_loss_curve_csv,
    write_prediction_histogram_csv,
)

from helpers import quadrant_pair


def toy_dataset(n=200, n_features=6, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n_features))
    w = rng.normal(size=n_features) * 0.2
    y = X @ w + 0.3 + noise * rng.normal(size=n)
    return Dataset(
        features=X,
        labels=y,
        addrs=[TileAddr(0, 0, 0)] * n,
        slide_ids=["toy"] * n,
    )


def test_sample_tiles_deterministic_and_labeled():
    p, _, m = quadrant_pair(128, 32)
    ft = z.TileFeaturizer(p)
    a = z.sample_tiles(ft, m, n_per_level=5, seed=42, slide_id="s0")
    b = z.sample_tiles(ft, m, n_per_level=5, seed=42, slide_id="s0")
    assert np.array_equal(a.features, b.features)
    assert a.addrs == b.addrs
    assert len(a) == 5 * (m.max_depth + 1)
    for addr, label in zip(a.addrs, a.labels):
        assert label == m.reward(addr)
    assert a.provenance == [{"slide_id": "s0", "seed": 42, "n_per_level": 5}]
    c = z.sample_tiles(ft, m, n_per_level=5, seed=43, slide_id="s0")
    assert a.addrs != c.addrs
    with pytest.raises(ValueError):
        z.sample_tiles(ft, m, n_per_level=0, seed=0)


def test_dataset_concat():
    a = toy_dataset(10, seed=1)
    b = toy_dataset(20, seed=2)
    both = Dataset.concat([a, b])
    assert len(both) == 30
    assert both.slide_ids == a.slide_ids + b.slide_ids
    with pytest.raises(ValueError):
        Dataset.concat([])


def test_train_linear_fits_a_linear_target():
    data = toy_dataset(400, seed=3)
    model, curve = z.train_linear(data, lr=0.01, l2_lambda=0.0, epochs=120, stop_tol=1e-9)
    preds = z.predict(model, data.features)
    # targets sit inside the clamp range only partially; compare raw fit
    mse = float(np.mean((preds - np.clip(data.labels, 0.0, 1.0)) ** 2))
    assert curve[-1][1] < curve[0][1]
    assert curve[-1][1] < 0.01
    assert mse < 0.05


def test_train_linear_stops_when_flat():
    data = toy_dataset(100, seed=4)
    _, curve = z.train_linear(data, epochs=50, stop_tol=1e9)
    assert len(curve) <= 2


def test_linear_l2_applies_to_weights_not_bias():
    model = regressor.LinearModel(
        weights=np.array([0.5, -0.25]), bias=0.75, l2_lambda=0.1
    )
    feats = np.zeros((4, 2))
    labels = np.zeros(4)
    loss, grads = linear_loss_and_grads(model, feats, labels)
    # with zero inputs the data term only sees the bias
    assert grads["bias"] == pytest.approx(2 * 0.75)
    assert np.all(grads["weights"] * model.weights >= 0)
    assert np.any(grads["weights"] != 0.0)
    bare = regressor.LinearModel(
        weights=np.array([0.5, -0.25]), bias=0.75, l2_lambda=0.0
    )
    _, bare_grads = linear_loss_and_grads(bare, feats, labels)
    assert np.all(bare_grads["weights"] == 0.0)
    assert bare_grads["bias"] == pytest.approx(grads["bias"])


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_regressor_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(8)
    F = 9
    X = rng.normal(size=(12, F))
    y = rng.uniform(size=12)
    if kind == "linear":
        model = regressor.LinearModel(
            weights=rng.normal(size=F) * 0.3, bias=0.1, l2_lambda=1e-3
        )
        loss_fn = lambda: linear_loss_and_grads(model, X, y)
        names = ["weights", "bias"]
    else:
        model = regressor.MlpModel(
            w1=rng.normal(0.0, math.sqrt(2.0 / F), (F, 8)),
            b1=np.zeros(8),
            w2=rng.normal(0.0, 0.5, 8),
            b2=0.0,
        )
        loss_fn = lambda: mlp_loss_and_grads(model, X, y)
        names = ["w1", "b1", "w2", "b2"]
    _, grads = loss_fn()
    h = 1e-6
    for name in names:
        value = getattr(model, name)
        if np.isscalar(value) or np.ndim(value) == 0:
            setattr(model, name, value + h)
            up, _ = loss_fn()
            setattr(model, name, value - h)
            down, _ = loss_fn()
            setattr(model, name, value)
            fd = (up - down) / (2 * h)
            g = grads[name]
            assert abs(g - fd) / max(1e-12, abs(g) + abs(fd)) < 1e-4
            continue
        flat = value.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        rng2 = np.random.default_rng(len(flat))
        for j in rng2.choice(flat.size, size=min(10, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + h
            up, _ = loss_fn()
            flat[j] = orig - h
            down, _ = loss_fn()
            flat[j] = orig
            fd = (up - down) / (2 * h)
            assert abs(g[j] - fd) / max(1e-12, abs(g[j]) + abs(fd)) < 1e-4


def test_train_mlp_curve_shape_and_progress():
    data = toy_dataset(300, seed=5)
    val = toy_dataset(80, seed=6)
    model, curve = z.train_mlp(data, val_data=val, epochs=5, seed=0)
    assert len(curve) == 5
    assert [c[0] for c in curve] == [0, 1, 2, 3, 4]
    assert curve[-1][1] < curve[0][1]
    assert all(math.isfinite(c[2]) for c in curve)
    _, no_val = z.train_mlp(data, epochs=2, seed=0)
    assert all(math.isnan(c[2]) for c in no_val)


def test_train_mlp_deterministic():
    data = toy_dataset(120, seed=7)
    m1, c1 = z.train_mlp(data, epochs=3, seed=11)
    m2, c2 = z.train_mlp(data, epochs=3, seed=11)
    assert np.array_equal(m1.w1, m2.w1) and np.array_equal(m1.w2, m2.w2)
    assert c1 == c2


def test_predict_clamps_and_shapes():
    hot = regressor.LinearModel(weights=np.zeros(3), bias=1.7, l2_lambda=0.0)
    cold = regressor.LinearModel(weights=np.zeros(3), bias=-0.3, l2_lambda=0.0)
    x = np.zeros(3)
    assert z.predict(hot, x) == 1.0
    assert z.predict(cold, x) == 0.0
    batch = z.predict(hot, np.zeros((5, 3)))
    assert batch.shape == (5,)
    assert np.all(batch == 1.0)


def test_agreement_rate_threshold():
    preds = np.array([0.6, 0.4, 0.9])
    labels = np.array([1.0, 0.0, 0.2])
    assert agreement_rate(preds, labels) == pytest.approx(2 / 3)
    assert agreement_rate(preds, labels, threshold=0.95) == pytest.approx(2 / 3)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_model_checkpoint_round_trip(tmp_path, kind):
    rng = np.random.default_rng(9)
    if kind == "linear":
        model = regressor.LinearModel(
            weights=rng.normal(size=4), bias=0.25, l2_lambda=1e-4
        )
    else:
        model = regressor.MlpModel(
            w1=rng.normal(size=(4, 3)),
            b1=rng.normal(size=3),
            w2=rng.normal(size=3),
            b2=0.125,
        )
    path = tmp_path / "model.json"
    save_model_checkpoint(model, path, config={"note": "test"})
    data = json.loads(path.read_text())
    assert data["format"] == MODEL_FORMAT
    assert data["kind"] == kind
    loaded = load_model_checkpoint(path)
    x = rng.normal(size=(6, 4))
    assert np.array_equal(z.predict(loaded, x), z.predict(model, x))


def test_model_checkpoint_rejects_unknown(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "other/1", "kind": "linear"}')
    with pytest.raises(ValueError):
        load_model_checkpoint(path)


def test_full_scan_select_orders_and_breaks_ties():
    p, _, m = quadrant_pair(128, 32)
    ft = z.TileFeaturizer(p)
    oracle = lambda addr, feats: m.reward(addr)
    sel = full_scan_select(ft, oracle, m, top_fraction=0.25)
    assert len(sel.entries) == 4
    assert {a for a, _ in sel.entries} == {
        TileAddr(2, 0, 0),
        TileAddr(2, 1, 0),
        TileAddr(2, 0, 1),
        TileAddr(2, 1, 1),
    }
    assert sel.mean_reward == 1.0
    flat = full_scan_select(ft, lambda a, f: 0.5, m, top_fraction=0.25)
    assert [a for a, _ in flat.entries] == [
        TileAddr(2, 0, 0),
        TileAddr(2, 1, 0),
        TileAddr(2, 2, 0),
        TileAddr(2, 3, 0),
    ]
    with pytest.raises(ValueError):
        full_scan_select(ft, oracle, m, top_fraction=0.0)


def test_model_scorer_uses_clamped_prediction():
    model = regressor.LinearModel(weights=np.zeros(2), bias=2.0, l2_lambda=0.0)
    scorer = model_scorer(model)
    assert scorer(TileAddr(0, 0, 0), np.zeros(2)) == 1.0


def test_loss_curve_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_curve_csv([(1, 0.5, 0.6), (2, 0.25, float("nan"))], path)
    assert path.read_text(encoding="utf-8") == (
        "epoch,split,mse\n1,train,0.5\n1,validation,0.6\n2,train,0.25\n"
    )


def test_prediction_histogram_csv(tmp_path):
    preds = np.array([0.55, 0.05, 1.0, 0.5])
    labels = np.array([0.5, 0.5, 0.05, 1.5])
    path = tmp_path / "hist.csv"
    write_prediction_histogram_csv(preds, labels, path, bins=10)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "bucket_lo,bucket_hi,count"
    counts = [int(line.split(",")[2]) for line in lines[1:]]
    assert len(counts) == 10
    # errors 0.05, 0.45, 0.95 and 1.0 (the closed right edge of the last bucket)
    assert counts[0] == 1 and counts[4] == 1 and counts[9] == 2
    assert sum(counts) == 4
