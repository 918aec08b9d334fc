"""Shared builders and independent oracles used across the test modules."""

import numpy as np

from zoomroi import TilePyramid, compute_reward_map

BENCH_SEED = 3
DESIGNATED_TRAIN = (0, 2, 3)


def solid_image(width, height, value=200):
    return np.full((height, width, 3), value, dtype=np.uint8)


def block_mask(width, height, blocks):
    """Boolean mask with the given (x0, y0, x1, y1) rectangles set."""
    mask = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in blocks:
        mask[y0:y1, x0:x1] = True
    return mask


def checker_mask(width, height):
    ys, xs = np.mgrid[0:height, 0:width]
    return (xs + ys) % 2 == 0


def quadrant_pair(size=512, tile=64):
    """Plain slide whose top-left quadrant is fully marked."""
    image = solid_image(size, size)
    mask = block_mask(size, size, [(0, 0, size // 2, size // 2)])
    pyramid = TilePyramid.from_array(image, tile_size=tile)
    return pyramid, mask, compute_reward_map(pyramid, mask)


def depth_oracle(width, height, tile_size):
    """Doubling count until one tile covers the longest side."""
    depth = 0
    cover = tile_size
    while cover < max(width, height):
        cover *= 2
        depth += 1
    return depth


def enum_qstar(reward_map, gamma=1.0):
    """Optimal action values by top-down recursion over full paths."""
    from zoomroi import child

    memo = {}

    def value(addr):
        if addr.level == reward_map.max_depth:
            return 0.0
        if addr not in memo:
            memo[addr] = max(
                qvalue(addr, a) for a in reward_map.valid_children(addr)
            )
        return memo[addr]

    def qvalue(addr, action):
        c = child(addr, action)
        return reward_map.reward(c) + gamma * value(c)

    table = {}
    for level in range(reward_map.max_depth):
        for addr in reward_map.in_image_addrs(level):
            vec = [0.0, 0.0, 0.0, 0.0]
            for a in reward_map.valid_children(addr):
                vec[a] = qvalue(addr, a)
            table[addr] = vec
    return table


def run_cli(argv):
    """Invoke the console entry point in-process, returning its exit code."""
    from zoomroi import cli

    try:
        return cli.main(list(argv))
    except SystemExit as exc:  # argparse errors
        return exc.code
