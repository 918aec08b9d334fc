"""Leaf selection strategies over a scored tile pyramid.

All strategies consult a scorer binding with the signature
``binding(state_addr, action, child_addr) -> float`` so the same search
code runs against a q-function (scores state-action pairs), a value
regressor (scores the candidate child tile), or the ground-truth oracle.
Action validity and ground-truth evaluation come from the reward map,
whose in-image counts define the tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .pyramid import TileAddr, child
from .regressor import predict


def reward_oracle_binding(reward_map):
    """Scores a candidate child by its true reward (myopic oracle)."""

    def binding(state, action, child_addr):
        return reward_map.reward(child_addr)

    return binding


def qstar_binding(qstar):
    """Scores (state, action) with an exact optimal value table."""

    def binding(state, action, child_addr):
        return float(qstar[TileAddr(*state)][action])

    return binding


def q_binding(q, featurizer):
    """Scores (state, action) with a learned q-function."""

    def binding(state, action, child_addr):
        return float(q.values(state, featurizer(state))[action])

    return binding


def value_binding(model, featurizer):
    """Scores the candidate child tile with a learned value regressor."""

    def binding(state, action, child_addr):
        return float(predict(model, featurizer(child_addr)))

    return binding


def greedy_descend(reward_map, binding, start=None):
    """Follow the argmax-scored child from ``start`` (default root) to a leaf.

    Ties break toward the lowest action id (NW before NE before SW before
    SE). Returns (leaf_addr, trajectory) where trajectory lists
    (action, child_addr, score) per step.
    """
    addr = TileAddr(*start) if start is not None else TileAddr(0, 0, 0)
    if reward_map.in_image_px(addr) == 0:
        raise ValueError(f"start tile {addr} is fully padded")
    trajectory = []
    while addr.level < reward_map.max_depth:
        best = None
        for a in reward_map.valid_children(addr):
            c = child(addr, a)
            score = float(binding(addr, a, c))
            if best is None or score > best[2]:
                best = (a, c, score)
        addr = best[1]
        trajectory.append(best)
    return addr, trajectory


@dataclass(frozen=True)
class BeamEntry:
    addr: TileAddr
    value: float
    path: tuple


@dataclass(frozen=True)
class SelectionEntry:
    addr: TileAddr
    score: object  # float, or None when the strategy assigns no score
    reward: float


@dataclass(frozen=True)
class SelectionReport:
    entries: tuple
    mean_reward: float
    histogram: dict
    regret: float


def beam_search(reward_map, binding, k, beam_width=None):
    """Level-synchronous beam search; returns the evaluated top-k leaves.

    Each wave expands every beam entry's valid children, scores them with
    the binding, and keeps the best ``beam_width`` (ties by (row, col)).
    Entries are ranked by their own score, not a cumulative path score.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if beam_width is None:
        beam_width = k
    if beam_width < k:
        raise ValueError(f"beam_width {beam_width} must be >= k {k}")
    beam = [BeamEntry(TileAddr(0, 0, 0), 0.0, ())]
    for _ in range(reward_map.max_depth):
        candidates = []
        seen = set()
        for entry in beam:
            for a in reward_map.valid_children(entry.addr):
                c = child(entry.addr, a)
                if c in seen:
                    continue
                seen.add(c)
                candidates.append(
                    BeamEntry(c, float(binding(entry.addr, a, c)), entry.path + (a,))
                )
        candidates.sort(key=lambda e: (-e.value, e.addr.row, e.addr.col))
        beam = candidates[:beam_width]
    if len(beam) < k:
        raise ValueError(f"only {len(beam)} leaves reachable, need k={k}")
    return evaluate_selection([(e.addr, e.value) for e in beam[:k]], reward_map)


def brute_force_topk(reward_map, k):
    """The exact k best in-image leaves; ties by (row, col)."""
    leaves = reward_map.in_image_addrs(reward_map.max_depth)
    if not 1 <= k <= len(leaves):
        raise ValueError(f"k must be in [1, {len(leaves)}], got {k}")
    leaves.sort(key=lambda a: (-reward_map.reward(a), a.row, a.col))
    return leaves[:k]


def evaluate_selection(selection, reward_map):
    """Ground-truth report for a list of leaves (or (leaf, score) pairs).

    Regret is the brute-force top-k mean reward minus the selection's mean,
    for k = len(selection).
    """
    if not selection:
        raise ValueError("empty selection")
    entries = []
    for item in selection:
        # Items are either a bare address or an (address, score) pair.
        if len(item) == 2 and isinstance(item[0], (tuple, TileAddr)):
            addr = TileAddr(*item[0])
            score = None if item[1] is None else float(item[1])
        else:
            addr, score = TileAddr(*item), None
        entries.append(SelectionEntry(addr, score, reward_map.reward(addr)))
    rewards = [e.reward for e in entries]
    mean_reward = float(np.mean(rewards))
    histogram = {
        "zero": sum(1 for r in rewards if r == 0.0),
        "partial": sum(1 for r in rewards if 0.0 < r < 1.0),
        "full": sum(1 for r in rewards if r == 1.0),
    }
    best = brute_force_topk(reward_map, len(entries))
    best_mean = float(np.mean([reward_map.reward(a) for a in best]))
    return SelectionReport(
        entries=tuple(entries),
        mean_reward=mean_reward,
        histogram=histogram,
        regret=best_mean - mean_reward,
    )


def report_to_dict(report):
    return {
        "entries": [
            {
                "level": e.addr.level,
                "col": e.addr.col,
                "row": e.addr.row,
                "score": e.score,
                "reward": e.reward,
            }
            for e in report.entries
        ],
        "mean_reward": report.mean_reward,
        "histogram": dict(report.histogram),
        "regret": report.regret,
    }


def render_overlay(pyramid, addrs, path, max_dim=512):
    """Write a downsampled view of the slide with selected regions outlined."""
    factor = max(1, math.ceil(max(pyramid.width, pyramid.height) / max_dim))
    pad_h = -pyramid.height % factor
    pad_w = -pyramid.width % factor
    img = np.pad(
        pyramid.pixels.astype(np.int64),
        ((0, pad_h), (0, pad_w), (0, 0)),
        constant_values=255,
    )
    h, w = img.shape[0] // factor, img.shape[1] // factor
    small = (
        img.reshape(h, factor, w, factor, 3).sum(axis=(1, 3)) // (factor * factor)
    ).astype(np.uint8)
    color = np.array([255, 0, 0], dtype=np.uint8)
    for addr in addrs:
        x0, y0, size = pyramid.region(TileAddr(*addr))
        sx0, sy0 = x0 // factor, y0 // factor
        sx1 = min(w, (x0 + size) // factor)
        sy1 = min(h, (y0 + size) // factor)
        if sx1 <= sx0 or sy1 <= sy0:
            continue
        small[sy0 : min(sy0 + 2, sy1), sx0:sx1] = color
        small[max(sy1 - 2, sy0) : sy1, sx0:sx1] = color
        small[sy0:sy1, sx0 : min(sx0 + 2, sx1)] = color
        small[sy0:sy1, max(sx1 - 2, sx0) : sx1] = color
    Image.fromarray(small).save(path)
