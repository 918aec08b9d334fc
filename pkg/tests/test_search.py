import json

import numpy as np
import pytest
from PIL import Image

import zoomroi as z
from zoomroi import search
from zoomroi.pyramid import NE, NW, SE, SW, TileAddr
from zoomroi.qlearn import Experience, backward_induction
from zoomroi.regressor import LinearModel
from zoomroi.scoring import compute_reward_map

from helpers import checker_mask, quadrant_pair, solid_image


@pytest.fixture(scope="module")
def quadrant():
    return quadrant_pair(128, 32)


@pytest.fixture(scope="module")
def trap():
    """One perfect leaf hidden in a mediocre quadrant.

    The NW quadrant holds a single fully cancerous leaf (fraction 0.25 at
    level 1), while every NE leaf is a uniform 0.5. A myopic descent walks
    into NE; planning with exact values recovers the 1.0 leaf.
    """
    mask = np.zeros((128, 128), dtype=np.uint8)
    mask[0:32, 0:32] = 1
    mask[0:64, 64:128] = checker_mask(64, 64)
    p = z.TilePyramid.from_array(solid_image(128, 128), tile_size=32)
    m = compute_reward_map(p, mask)
    return p, m


def test_reward_oracle_binding(quadrant):
    _, _, m = quadrant
    b = search.reward_oracle_binding(m)
    assert b(TileAddr(0, 0, 0), NW, TileAddr(1, 0, 0)) == 1.0
    assert b(TileAddr(0, 0, 0), SE, TileAddr(1, 1, 1)) == 0.0


def test_qstar_binding(quadrant):
    _, _, m = quadrant
    qstar = backward_induction(m, gamma=1.0)
    b = search.qstar_binding(qstar)
    got = b((0, 0, 0), NW, TileAddr(1, 0, 0))
    assert got == qstar[TileAddr(0, 0, 0)][NW]
    assert got == 2.0  # 1.0 now plus a 1.0 leaf underneath


def test_q_binding(quadrant):
    _, _, m = quadrant
    q = z.TabularQ()
    exp = Experience(
        state=TileAddr(0, 0, 0),
        action=NE,
        next_state=TileAddr(1, 1, 0),
        reward=0.0,
        terminal=True,
        state_features=None,
        next_features=None,
        next_valid=(),
    )
    q.apply_td_step([exp], [0.7], lr=1.0)
    b = search.q_binding(q, lambda addr: None)
    assert b(TileAddr(0, 0, 0), NE, TileAddr(1, 1, 0)) == pytest.approx(0.7)
    assert b(TileAddr(0, 0, 0), SW, TileAddr(1, 0, 1)) == 0.0


def test_value_binding(quadrant):
    _, _, m = quadrant
    model = LinearModel(weights=np.zeros(5), bias=0.3, l2_lambda=0.0)
    b = search.value_binding(model, lambda addr: np.zeros(5))
    assert b(TileAddr(0, 0, 0), NW, TileAddr(1, 0, 0)) == pytest.approx(0.3)


def test_greedy_descend_tie_breaks_toward_first_action(quadrant):
    _, _, m = quadrant
    leaf, trajectory = search.greedy_descend(m, lambda s, a, c: 0.0)
    assert leaf == TileAddr(2, 0, 0)
    assert [t[0] for t in trajectory] == [NW, NW]
    leaf, _ = search.greedy_descend(m, lambda s, a, c: 0.0, start=(1, 1, 0))
    assert leaf == TileAddr(2, 2, 0)


def test_greedy_descend_rejects_padded_start():
    p = z.TilePyramid.from_array(solid_image(65, 64), tile_size=64)
    m = compute_reward_map(p, np.ones((64, 65), dtype=np.uint8))
    with pytest.raises(ValueError, match="padded"):
        search.greedy_descend(m, lambda s, a, c: 0.0, start=(1, 0, 1))


def test_greedy_planning_beats_myopic(trap):
    _, m = trap
    myopic_leaf, myopic_traj = search.greedy_descend(
        m, search.reward_oracle_binding(m)
    )
    assert myopic_traj[0][0] == NE
    assert m.reward(myopic_leaf) == 0.5
    qstar = backward_induction(m, gamma=1.0)
    best_leaf, best_traj = search.greedy_descend(m, search.qstar_binding(qstar))
    assert [t[0] for t in best_traj] == [NW, NW]
    assert best_leaf == TileAddr(2, 0, 0)
    assert m.reward(best_leaf) == 1.0
    assert best_traj[0][2] == 1.25  # 0.25 now plus the 1.0 leaf


def test_beam_with_full_width_matches_brute_force(quadrant):
    _, _, m = quadrant
    binding = search.reward_oracle_binding(m)
    for k in (1, 4, 7):
        report = z.beam_search(m, binding, k=k, beam_width=16)
        assert [e.addr for e in report.entries] == z.brute_force_topk(m, k)
        assert report.regret == 0.0


def test_narrow_beam_needs_planning_scores(trap):
    _, m = trap
    myopic = z.beam_search(m, search.reward_oracle_binding(m), k=1)
    assert myopic.mean_reward == 0.5
    qstar = backward_induction(m, gamma=1.0)
    planned = z.beam_search(m, search.qstar_binding(qstar), k=1)
    assert [e.addr for e in planned.entries] == [TileAddr(2, 0, 0)]
    assert planned.mean_reward == 1.0
    assert planned.regret == 0.0


def test_beam_validates_arguments(quadrant):
    _, _, m = quadrant
    binding = search.reward_oracle_binding(m)
    with pytest.raises(ValueError):
        z.beam_search(m, binding, k=0)
    with pytest.raises(ValueError):
        z.beam_search(m, binding, k=4, beam_width=1)


def test_brute_force_topk_orders_and_validates(quadrant):
    _, _, m = quadrant
    top = z.brute_force_topk(m, 4)
    assert top == [
        TileAddr(2, 0, 0),
        TileAddr(2, 1, 0),
        TileAddr(2, 0, 1),
        TileAddr(2, 1, 1),
    ]
    with pytest.raises(ValueError):
        z.brute_force_topk(m, 0)
    with pytest.raises(ValueError):
        z.brute_force_topk(m, 17)


def test_evaluate_selection_frozen_report(quadrant):
    _, _, m = quadrant
    picks = [TileAddr(2, 0, 0), TileAddr(2, 1, 0), TileAddr(2, 3, 3)]
    report = z.evaluate_selection(picks, m)
    assert report.mean_reward == 2 / 3
    assert report.histogram == {"zero": 1, "partial": 0, "full": 2}
    assert report.regret == 1.0 - 2 / 3
    assert all(e.score is None for e in report.entries)
    paired = z.evaluate_selection([(a, 0.9) for a in picks], m)
    assert [e.score for e in paired.entries] == [0.9, 0.9, 0.9]
    assert paired.mean_reward == report.mean_reward
    with pytest.raises(ValueError):
        z.evaluate_selection([], m)


def test_report_to_dict_round_trips_as_json(quadrant):
    _, _, m = quadrant
    report = z.evaluate_selection([(TileAddr(2, 0, 0), 0.75)], m)
    d = search.report_to_dict(report)
    assert set(d) == {"entries", "mean_reward", "histogram", "regret"}
    assert d["entries"][0] == {
        "level": 2,
        "col": 0,
        "row": 0,
        "score": 0.75,
        "reward": 1.0,
    }
    a = json.dumps(d, sort_keys=True)
    b = json.dumps(search.report_to_dict(z.evaluate_selection([(TileAddr(2, 0, 0), 0.75)], m)), sort_keys=True)
    assert a == b


def test_render_overlay_outlines_selection(tmp_path):
    p = z.TilePyramid.from_array(solid_image(128, 128), tile_size=32)
    out = tmp_path / "overlay.png"
    search.render_overlay(p, [(2, 0, 0)], out, max_dim=64)
    img = np.asarray(Image.open(out))
    assert img.shape == (64, 64, 3)
    red = np.array([255, 0, 0], dtype=np.uint8)
    # the selected region covers small-image rows/cols [0, 16)
    assert np.array_equal(img[0, 0], red)
    assert np.array_equal(img[15, 15], red)
    assert np.array_equal(img[8, 1], red)
    assert np.array_equal(img[8, 8], [200, 200, 200])
    assert np.array_equal(img[40, 40], [200, 200, 200])
    assert np.all(img[3:13, 3:13] == 200)


def test_render_overlay_default_factor(tmp_path):
    p = z.TilePyramid.from_array(solid_image(100, 60), tile_size=32)
    out = tmp_path / "full.png"
    search.render_overlay(p, [], out)
    img = np.asarray(Image.open(out))
    assert img.shape == (60, 100, 3)
    assert np.all(img == 200)
