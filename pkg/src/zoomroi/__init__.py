"""Top-k region-of-interest search over quadtree tile pyramids."""

from ._common import DivergenceError
from .env import Transition, ZoomEnv, episode_return
from .pyramid import (
    ACTION_NAMES,
    ACTIONS,
    FEATURE_DIM,
    IMAGENET_MEAN,
    IMAGENET_STD,
    FeatureConfig,
    Tile,
    TileAddr,
    TileFeaturizer,
    TilePyramid,
    child,
    features,
    load_slide,
    max_depth_for,
    normalize,
)
from .qlearn import (
    EpsilonSchedule,
    LinearQ,
    MlpQ,
    ReplayBuffer,
    TabularQ,
    TrainConfig,
    backward_induction,
    greedy_episode,
    select_action,
    td_target,
    train,
    update,
)
from .regressor import (
    Dataset,
    LinearModel,
    MlpModel,
    full_scan_select,
    predict,
    sample_tiles,
    train_linear,
    train_mlp,
)
from .scoring import RewardMap, compute_reward_map, load_mask, read_reward_csv, write_reward_csv
from .search import (
    SelectionReport,
    beam_search,
    brute_force_topk,
    evaluate_selection,
    greedy_descend,
)
from .synth import Ellipse, SynthSpec, benchmark_suite, generate, rasterize

__version__ = "0.1.0"
