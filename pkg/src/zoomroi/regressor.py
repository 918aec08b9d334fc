"""Supervised tile-score regression.

Instead of bootstrapped action values, these models learn a tile's
ground-truth cancer fraction directly from its feature vector. Training
data is sampled uniformly (with replacement) over the in-image tiles of
each level, so every magnification contributes equally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._common import DivergenceError, dump_json, load_json, write_csv

MODEL_FORMAT = "zoomroi-model/1"


@dataclass
class Dataset:
    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,)
    addrs: list
    slide_ids: list
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def concat(cls, datasets):
        if not datasets:
            raise ValueError("nothing to concatenate")
        return cls(
            features=np.concatenate([d.features for d in datasets]),
            labels=np.concatenate([d.labels for d in datasets]),
            addrs=[a for d in datasets for a in d.addrs],
            slide_ids=[s for d in datasets for s in d.slide_ids],
            provenance=[p for d in datasets for p in d.provenance],
        )


def sample_tiles(featurizer, reward_map, n_per_level, seed, slide_id="slide"):
    """Uniform with-replacement sample of labeled tiles from every level."""
    if n_per_level < 1:
        raise ValueError("n_per_level must be >= 1")
    rng = np.random.default_rng(seed)
    feats = []
    labels = []
    addrs = []
    for level in range(reward_map.max_depth + 1):
        candidates = reward_map.in_image_addrs(level)
        picks = rng.integers(0, len(candidates), size=n_per_level)
        for i in picks:
            addr = candidates[int(i)]
            feats.append(featurizer(addr))
            labels.append(reward_map.reward(addr))
            addrs.append(addr)
    return Dataset(
        features=np.stack(feats),
        labels=np.asarray(labels, dtype=np.float64),
        addrs=addrs,
        slide_ids=[slide_id] * len(addrs),
        provenance=[
            {"slide_id": slide_id, "seed": int(seed), "n_per_level": int(n_per_level)}
        ],
    )


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    l2_lambda: float = 0.0

    kind = "linear"


@dataclass
class MlpModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    kind = "mlp"


def _raw_predict(model, feats):
    if isinstance(model, LinearModel):
        return feats @ model.weights + model.bias
    h = np.maximum(feats @ model.w1 + model.b1, 0.0)
    return h @ model.w2 + model.b2


def predict(model, features):
    """Predicted score(s) clamped to [0, 1]."""
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 1
    raw = _raw_predict(model, feats[None, :] if single else feats)
    out = np.clip(raw, 0.0, 1.0)
    return float(out[0]) if single else out


def linear_loss_and_grads(model, feats, labels):
    """MSE + l2*|w|^2 (bias excluded) and its analytic gradients."""
    n = len(labels)
    err = feats @ model.weights + model.bias - labels
    loss = float(np.mean(err**2) + model.l2_lambda * model.weights @ model.weights)
    gw = 2.0 * (feats.T @ err) / n + 2.0 * model.l2_lambda * model.weights
    gb = 2.0 * float(err.sum()) / n
    return loss, {"weights": gw, "bias": gb}


def mlp_loss_and_grads(model, feats, labels):
    """Plain MSE of the raw (unclamped) output and its analytic gradients."""
    n = len(labels)
    z1 = feats @ model.w1 + model.b1
    h = np.maximum(z1, 0.0)
    err = h @ model.w2 + model.b2 - labels
    loss = float(np.mean(err**2))
    dout = 2.0 * err / n
    dh = dout[:, None] * model.w2[None, :]
    dz1 = dh * (z1 > 0)
    grads = {
        "w1": feats.T @ dz1,
        "b1": dz1.sum(axis=0),
        "w2": h.T @ dout,
        "b2": float(dout.sum()),
    }
    return loss, grads


def train_linear(
    data,
    lr=1e-4,
    l2_lambda=1e-4,
    epochs=200,
    seed=0,
    stop_tol=1e-3,
):
    """Per-sample SGD on squared error with L2 on the weights (not the bias).

    Stops early when the epoch objective improves by less than ``stop_tol``.
    Returns the model and a curve of (epoch, train_mse).
    """
    feats = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.float64)
    rng = np.random.default_rng(seed)
    w = np.zeros(feats.shape[1])
    b = 0.0
    curve = []
    prev_obj = math.inf
    for epoch in range(epochs):
        for i in rng.permutation(len(labels)):
            err = feats[i] @ w + b - labels[i]
            w -= lr * (2.0 * err * feats[i] + 2.0 * l2_lambda * w)
            b -= lr * 2.0 * err
        mse = float(np.mean((feats @ w + b - labels) ** 2))
        obj = mse + l2_lambda * float(w @ w)
        if not np.isfinite(obj):
            raise DivergenceError(f"non-finite epoch loss {obj}")
        curve.append((epoch, mse))
        if prev_obj - obj < stop_tol:
            break
        prev_obj = obj
    return LinearModel(weights=w, bias=float(b), l2_lambda=l2_lambda), curve


def train_mlp(
    train_data,
    val_data=None,
    lr=1e-3,
    batch_size=64,
    epochs=9,
    seed=0,
    hidden=64,
    beta1=0.9,
    beta2=0.999,
    adam_eps=1e-8,
):
    """Adam on minibatch MSE. Returns the model and per-epoch curves.

    The curve rows are (epoch, train_mse, val_mse); val_mse is NaN when no
    validation split is given. Reported MSEs use the clamped predictions,
    the optimization itself runs on the raw output.
    """
    feats = np.asarray(train_data.features, dtype=np.float64)
    labels = np.asarray(train_data.labels, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n_features = feats.shape[1]
    model = MlpModel(
        w1=rng.normal(0.0, np.sqrt(2.0 / n_features), (n_features, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, np.sqrt(2.0 / hidden), hidden),
        b2=0.0,
    )
    params = ["w1", "b1", "w2", "b2"]
    m_state = {p: np.zeros_like(getattr(model, p)) for p in params}
    v_state = {p: np.zeros_like(getattr(model, p)) for p in params}
    step = 0
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = mlp_loss_and_grads(model, feats[idx], labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite batch loss {loss}")
            step += 1
            for p in params:
                g = grads[p]
                m_state[p] = beta1 * m_state[p] + (1 - beta1) * g
                v_state[p] = beta2 * v_state[p] + (1 - beta2) * (g * g)
                m_hat = m_state[p] / (1 - beta1**step)
                v_hat = v_state[p] / (1 - beta2**step)
                setattr(
                    model,
                    p,
                    getattr(model, p) - lr * m_hat / (np.sqrt(v_hat) + adam_eps),
                )
        train_mse = float(np.mean((predict(model, feats) - labels) ** 2))
        if val_data is not None:
            val_mse = float(
                np.mean((predict(model, val_data.features) - val_data.labels) ** 2)
            )
        else:
            val_mse = math.nan
        curve.append((epoch, train_mse, val_mse))
    return model, curve


def agreement_rate(predictions, labels, threshold=0.5):
    """Fraction of samples where prediction and label fall on the same side."""
    preds = np.asarray(predictions) >= threshold
    truth = np.asarray(labels) >= threshold
    return float(np.mean(preds == truth))


def model_scorer(model):
    return lambda addr, feats: float(predict(model, feats))


@dataclass(frozen=True)
class ScanSelection:
    entries: tuple  # ((addr, score), ...) best first
    mean_reward: float


def full_scan_select(featurizer, scorer, reward_map, top_fraction):
    """Score every in-image leaf and keep the best ceil(p * N).

    ``scorer`` is called as scorer(addr, features). Score ties break by
    (row, col). Also reports the mean ground-truth reward of the selection.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    leaves = reward_map.in_image_addrs(reward_map.max_depth)
    scored = [(addr, float(scorer(addr, featurizer(addr)))) for addr in leaves]
    scored.sort(key=lambda t: (-t[1], t[0].row, t[0].col))
    keep = math.ceil(top_fraction * len(scored))
    chosen = scored[:keep]
    mean_reward = float(np.mean([reward_map.reward(a) for a, _ in chosen]))
    return ScanSelection(entries=tuple(chosen), mean_reward=mean_reward)


def save_model_checkpoint(model, path, config=None):
    if isinstance(model, LinearModel):
        params = {
            "weights": model.weights.tolist(),
            "bias": float(model.bias),
            "l2_lambda": float(model.l2_lambda),
        }
    elif isinstance(model, MlpModel):
        params = {
            "w1": model.w1.tolist(),
            "b1": model.b1.tolist(),
            "w2": model.w2.tolist(),
            "b2": float(model.b2),
        }
    else:
        raise ValueError(f"unknown model type {type(model).__name__}")
    payload = {
        "format": MODEL_FORMAT,
        "kind": model.kind,
        "params": params,
        "config": config if config is not None else {},
    }
    dump_json(payload, path)


def load_model_checkpoint(path):
    payload = load_json(path)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model checkpoint: {payload.get('format')!r}")
    params = payload["params"]
    if payload["kind"] == "linear":
        return LinearModel(
            weights=np.asarray(params["weights"], dtype=np.float64),
            bias=float(params["bias"]),
            l2_lambda=float(params["l2_lambda"]),
        )
    if payload["kind"] == "mlp":
        return MlpModel(
            w1=np.asarray(params["w1"], dtype=np.float64),
            b1=np.asarray(params["b1"], dtype=np.float64),
            w2=np.asarray(params["w2"], dtype=np.float64),
            b2=float(params["b2"]),
        )
    raise ValueError(f"unknown model kind {payload['kind']!r}")


def write_loss_curve_csv(curve, path):
    """Rows of (epoch, split, mse); curves may or may not carry a val MSE."""
    rows = []
    for point in curve:
        epoch = point[0]
        rows.append((epoch, "train", float(point[1])))
        if len(point) > 2 and not math.isnan(point[2]):
            rows.append((epoch, "validation", float(point[2])))
    write_csv(path, "epoch,split,mse", rows)


def write_prediction_histogram_csv(predictions, labels, path, bins=10):
    """Histogram of absolute prediction error over [0, 1]."""
    err = np.abs(np.asarray(predictions) - np.asarray(labels))
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(err, bins=edges)
    rows = [
        (float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)
    ]
    write_csv(path, "bucket_lo,bucket_hi,count", rows)
