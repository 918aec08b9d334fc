"""Deterministic zoom-in episode over one reward map.

States are tile addresses; the four actions descend into quadrant children.
Every episode runs from the root to a leaf (exactly max_depth steps) and
each step is rewarded with the child tile's ground-truth cancer fraction.
"""

from __future__ import annotations

from dataclasses import dataclass

from ._common import write_csv
from .pyramid import ACTION_NAMES, TileAddr, child


@dataclass(frozen=True)
class Transition:
    state: TileAddr
    action: int
    next_state: TileAddr
    reward: float
    terminal: bool


class ZoomEnv:
    def __init__(self, reward_map):
        self.reward_map = reward_map
        self.current = TileAddr(0, 0, 0)
        self.done = self.reward_map.max_depth == 0

    def reset(self):
        self.current = TileAddr(0, 0, 0)
        self.done = self.reward_map.max_depth == 0
        return self.current

    def valid_actions(self):
        """Actions leading to children that overlap the image, NW..SE order."""
        if self.done:
            raise ValueError("episode is done; call reset()")
        return self.reward_map.valid_children(self.current)

    def step(self, action):
        if self.done:
            raise ValueError("episode is done; call reset()")
        if action not in self.valid_actions():
            raise ValueError(
                f"action {action} invalid at {self.current}: child is fully padded"
            )
        state = self.current
        nxt = child(state, action, max_depth=self.reward_map.max_depth)
        reward = self.reward_map.reward(nxt)
        self.current = nxt
        self.done = nxt.level == self.reward_map.max_depth
        return Transition(
            state=state,
            action=action,
            next_state=nxt,
            reward=reward,
            terminal=self.done,
        )


def episode_return(transitions):
    """Sum of rewards along a full root-to-leaf transition sequence."""
    if not transitions:
        raise ValueError("empty episode")
    first = transitions[0]
    if first.state != TileAddr(0, 0, 0):
        raise ValueError("episode must start at the root tile")
    for prev, cur in zip(transitions, transitions[1:]):
        if cur.state != prev.next_state:
            raise ValueError(
                f"non-contiguous path: {prev.next_state} followed by {cur.state}"
            )
    for t in transitions:
        if t.next_state != child(t.state, t.action):
            raise ValueError(f"transition {t} does not match its action")
    if not transitions[-1].terminal:
        raise ValueError("episode does not end at a leaf")
    return float(sum(t.reward for t in transitions))


def write_trace_csv(transitions, path):
    """Dump an episode as CSV rows of the tiles entered at each step."""
    rows = [
        (
            i,
            t.next_state.level,
            t.next_state.col,
            t.next_state.row,
            ACTION_NAMES[t.action],
            float(t.reward),
        )
        for i, t in enumerate(transitions, start=1)
    ]
    write_csv(path, "step,level,col,row,action,reward", rows)
