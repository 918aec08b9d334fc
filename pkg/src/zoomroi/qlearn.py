"""Q-learning on the zoom environment.

The update rule is vanilla one-step TD with experience replay and no target
network: for each sampled transition the target is
``r`` at a leaf, else ``r + gamma * max_a' Q(s', a')`` over the valid
actions of the next tile, with targets frozen from the pre-update
parameters. Function approximators share one interface so the same loop
trains a lookup table, a linear head, or a one-hidden-layer MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._common import DivergenceError, dump_json, load_json, write_csv
from .pyramid import ACTIONS, TileAddr, child

CHECKPOINT_FORMAT = "zoomroi-q/1"


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay; the endpoints are returned exactly."""

    total_iters: int
    eps_start: float = 0.9
    eps_end: float = 0.02

    def epsilon(self, iteration):
        if iteration <= 0:
            return self.eps_start
        if iteration >= self.total_iters:
            return self.eps_end
        frac = iteration / self.total_iters
        return self.eps_start + (self.eps_end - self.eps_start) * frac


class ReplayBuffer:
    """Fixed-capacity FIFO with uniform sampling (with replacement)."""

    def __init__(self, capacity, rng):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._rng = rng
        self._items = []
        self._next = 0

    def push(self, item):
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size):
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


@dataclass(frozen=True)
class Experience:
    """One environment transition plus the tensors training needs."""

    state: TileAddr
    action: int
    next_state: TileAddr
    reward: float
    terminal: bool
    state_features: Optional[np.ndarray]
    next_features: Optional[np.ndarray]
    next_valid: tuple


class TabularQ:
    """Q-table keyed by tile address, zero-initialized.

    Addresses are only meaningful within one slide, so tabular training is
    restricted to a single environment.
    """

    kind = "tabular"

    def __init__(self):
        self._table = {}

    def values(self, state, features=None):
        row = self._table.get(TileAddr(*state))
        if row is None:
            return np.zeros(len(ACTIONS))
        return row.copy()

    def apply_td_step(self, batch, targets, lr):
        for exp, target in zip(batch, targets):
            row = self._table.setdefault(TileAddr(*exp.state), np.zeros(len(ACTIONS)))
            row[exp.action] += lr * (target - row[exp.action])

    def to_params(self):
        entries = []
        for addr in sorted(self._table):
            entries.append([addr.level, addr.col, addr.row, list(map(float, self._table[addr]))])
        return {"entries": entries}

    @classmethod
    def from_params(cls, params):
        q = cls()
        for level, col, row, values in params["entries"]:
            q._table[TileAddr(level, col, row)] = np.asarray(values, dtype=np.float64)
        return q


class LinearQ:
    """Four independent linear heads over the tile feature vector."""

    kind = "linear"

    def __init__(self, n_features):
        self.w = np.zeros((len(ACTIONS), n_features))
        self.b = np.zeros(len(ACTIONS))

    @property
    def n_features(self):
        return self.w.shape[1]

    def values(self, state, features):
        return self.w @ np.asarray(features, dtype=np.float64) + self.b

    def loss_and_grads(self, feats, actions, targets):
        n = len(actions)
        out = feats @ self.w.T + self.b
        pred = out[np.arange(n), actions]
        err = pred - targets
        loss = float(np.mean(err**2))
        dout = np.zeros_like(out)
        dout[np.arange(n), actions] = 2.0 * err / n
        return loss, {"w": dout.T @ feats, "b": dout.sum(axis=0)}

    def apply_td_step(self, batch, targets, lr):
        feats = np.stack([e.state_features for e in batch])
        actions = np.array([e.action for e in batch])
        _, grads = self.loss_and_grads(feats, actions, np.asarray(targets))
        self.w -= lr * grads["w"]
        self.b -= lr * grads["b"]

    def params_vector(self):
        return np.concatenate([self.w.ravel(), self.b])

    def set_params_vector(self, vec):
        k = self.w.size
        self.w = vec[:k].reshape(self.w.shape).copy()
        self.b = vec[k:].copy()

    def grads_vector(self, feats, actions, targets):
        loss, grads = self.loss_and_grads(feats, actions, targets)
        return loss, np.concatenate([grads["w"].ravel(), grads["b"]])

    def to_params(self):
        return {
            "n_features": self.n_features,
            "w": self.w.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_params(cls, params):
        q = cls(params["n_features"])
        q.w = np.asarray(params["w"], dtype=np.float64)
        q.b = np.asarray(params["b"], dtype=np.float64)
        return q


class MlpQ:
    """features -> 64 ReLU -> 4 action values."""

    kind = "mlp"

    def __init__(self, n_features, hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / n_features), (n_features, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, len(ACTIONS)))
        self.b2 = np.zeros(len(ACTIONS))

    @property
    def n_features(self):
        return self.w1.shape[0]

    def values(self, state, features):
        h = np.maximum(np.asarray(features, dtype=np.float64) @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def loss_and_grads(self, feats, actions, targets):
        n = len(actions)
        z1 = feats @ self.w1 + self.b1
        h = np.maximum(z1, 0.0)
        out = h @ self.w2 + self.b2
        pred = out[np.arange(n), actions]
        err = pred - targets
        loss = float(np.mean(err**2))
        dout = np.zeros_like(out)
        dout[np.arange(n), actions] = 2.0 * err / n
        dh = dout @ self.w2.T
        dz1 = dh * (z1 > 0)
        grads = {
            "w1": feats.T @ dz1,
            "b1": dz1.sum(axis=0),
            "w2": h.T @ dout,
            "b2": dout.sum(axis=0),
        }
        return loss, grads

    def apply_td_step(self, batch, targets, lr):
        feats = np.stack([e.state_features for e in batch])
        actions = np.array([e.action for e in batch])
        _, grads = self.loss_and_grads(feats, actions, np.asarray(targets))
        self.w1 -= lr * grads["w1"]
        self.b1 -= lr * grads["b1"]
        self.w2 -= lr * grads["w2"]
        self.b2 -= lr * grads["b2"]

    def params_vector(self):
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    def set_params_vector(self, vec):
        shapes = [self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape]
        out = []
        pos = 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(vec[pos : pos + size].reshape(shape).copy())
            pos += size
        self.w1, self.b1, self.w2, self.b2 = out

    def grads_vector(self, feats, actions, targets):
        loss, g = self.loss_and_grads(feats, actions, targets)
        return loss, np.concatenate(
            [g["w1"].ravel(), g["b1"], g["w2"].ravel(), g["b2"]]
        )

    def to_params(self):
        return {
            "n_features": self.n_features,
            "hidden": self.w1.shape[1],
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_params(cls, params):
        q = cls(params["n_features"], hidden=params["hidden"])
        q.w1 = np.asarray(params["w1"], dtype=np.float64)
        q.b1 = np.asarray(params["b1"], dtype=np.float64)
        q.w2 = np.asarray(params["w2"], dtype=np.float64)
        q.b2 = np.asarray(params["b2"], dtype=np.float64)
        return q


_Q_KINDS = {"tabular": TabularQ, "linear": LinearQ, "mlp": MlpQ}


def greedy_action(q, state, features, valid):
    """Argmax over the valid actions; ties go to the lowest action id."""
    if not valid:
        raise ValueError(f"no valid actions at {state}")
    vals = q.values(state, features)
    best = valid[0]
    for a in valid[1:]:
        if vals[a] > vals[best]:
            best = a
    return best


def select_action(q, state, features, valid, eps, rng):
    """Epsilon-greedy: explore uniformly over valid actions, else argmax."""
    if not valid:
        raise ValueError(f"no valid actions at {state}")
    if rng.random() < eps:
        return valid[int(rng.integers(len(valid)))]
    return greedy_action(q, state, features, valid)


def td_target(exp, q, gamma):
    """Bootstrap target with the max over the next tile's valid actions."""
    if exp.terminal or not exp.next_valid:
        return float(exp.reward)
    vals = q.values(exp.next_state, exp.next_features)
    best = max(float(vals[a]) for a in exp.next_valid)
    return float(exp.reward) + gamma * best


def update(q, batch, config):
    """One training step on a batch; returns the pre-step TD loss.

    Targets are computed with the current parameters before any write, so a
    batch whose targets already equal its predictions leaves the
    approximator untouched.
    """
    if not batch:
        raise ValueError("empty batch")
    targets = np.array([td_target(e, q, config.gamma) for e in batch])
    preds = np.array(
        [q.values(e.state, e.state_features)[e.action] for e in batch]
    )
    loss = float(np.mean((preds - targets) ** 2))
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite TD loss {loss}")
    q.apply_td_step(batch, targets, config.learning_rate)
    return loss


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    iterations: int = 100_000
    gamma: float = 1.0
    buffer_capacity: int = 10_000
    eps_start: float = 0.9
    eps_end: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("iterations, batch_size and buffer_capacity must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "gamma": self.gamma,
            "buffer_capacity": self.buffer_capacity,
            "eps_start": self.eps_start,
            "eps_end": self.eps_end,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class CurvePoint:
    episode: int
    iteration: int
    epsilon: float
    episode_return: float


def train(envs, q, config, featurizers=None):
    """Run epsilon-greedy episodes round-robin over ``envs`` and learn.

    One iteration = one environment step followed by one replay update.
    Episodes cycle through the environments in a freshly shuffled order per
    round. ``featurizers`` maps each env's tiles to feature vectors and may
    be None for the tabular table, which needs none.
    """
    if not envs:
        raise ValueError("need at least one environment")
    if featurizers is not None and len(featurizers) != len(envs):
        raise ValueError("need one featurizer per environment")
    if isinstance(q, TabularQ) and len(envs) > 1:
        raise ValueError(
            "tabular q-values are keyed by tile address and cannot be shared "
            "across slides; train one table per environment"
        )
    rng = np.random.default_rng(config.seed)
    schedule = EpsilonSchedule(config.iterations, config.eps_start, config.eps_end)
    buffer = ReplayBuffer(config.buffer_capacity, rng)
    curve = []
    iteration = 0
    episode = 0
    order = []
    while iteration < config.iterations:
        if not order:
            order = [int(i) for i in rng.permutation(len(envs))]
        env_i = order.pop(0)
        env = envs[env_i]
        feat = featurizers[env_i] if featurizers is not None else None
        state = env.reset()
        ep_eps = schedule.epsilon(iteration)
        ep_return = 0.0
        while not env.done and iteration < config.iterations:
            eps = schedule.epsilon(iteration)
            valid = env.valid_actions()
            state_features = feat(state) if feat is not None else None
            action = select_action(q, state, state_features, valid, eps, rng)
            t = env.step(action)
            if t.terminal:
                next_features, next_valid = None, ()
            else:
                next_features = feat(t.next_state) if feat is not None else None
                next_valid = env.valid_actions()
            buffer.push(
                Experience(
                    state=t.state,
                    action=t.action,
                    next_state=t.next_state,
                    reward=t.reward,
                    terminal=t.terminal,
                    state_features=state_features,
                    next_features=next_features,
                    next_valid=next_valid,
                )
            )
            update(q, buffer.sample(config.batch_size), config)
            ep_return += t.reward
            state = t.next_state
            iteration += 1
        if env.done:
            curve.append(CurvePoint(episode, iteration, ep_eps, ep_return))
            episode += 1
    return q, curve


def greedy_episode(env, q, featurizer=None):
    """Run one purely greedy episode; returns (transitions, return)."""
    state = env.reset()
    transitions = []
    while not env.done:
        features = featurizer(state) if featurizer is not None else None
        action = greedy_action(q, state, features, env.valid_actions())
        t = env.step(action)
        transitions.append(t)
        state = t.next_state
    return transitions, float(sum(t.reward for t in transitions))


def backward_induction(reward_map, gamma=1.0):
    """Exact optimal action values by dynamic programming from the leaves.

    Returns {addr: array of 4 values} for every in-image tile above the leaf
    level. Entries for fully padded children are left at 0 and must be
    masked with the map's valid actions when acting.
    """
    depth = reward_map.max_depth
    qstar = {}
    best_below = {}
    for level in range(depth - 1, -1, -1):
        for addr in reward_map.in_image_addrs(level):
            vec = np.zeros(len(ACTIONS))
            valid = reward_map.valid_children(addr)
            for a in valid:
                c = child(addr, a)
                vec[a] = reward_map.reward(c) + gamma * best_below.get(c, 0.0)
            qstar[addr] = vec
            best_below[addr] = max(float(vec[a]) for a in valid) if valid else 0.0
    return qstar


def save_q_checkpoint(q, path, config=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": q.kind,
        "params": q.to_params(),
        "config": config if config is not None else {},
    }
    dump_json(payload, path)


def load_q_checkpoint(path):
    payload = load_json(path)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a q checkpoint: {payload.get('format')!r}")
    cls = _Q_KINDS.get(payload.get("kind"))
    if cls is None:
        raise ValueError(f"unknown q kind {payload.get('kind')!r}")
    return cls.from_params(payload["params"])


def write_reward_curve_csv(curve, path):
    rows = [
        (p.episode, p.iteration, float(p.epsilon), float(p.episode_return))
        for p in curve
    ]
    write_csv(path, "episode,iteration,epsilon,return", rows)
