"""Command-line pipeline: generate, score, train, search, evaluate.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors. Every
JSON artifact embeds the resolved run parameters under "run"; CSV outputs
get a sibling <stem>.run.json because their column format is fixed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import qlearn, regressor, scoring, search, synth
from ._common import dump_json, load_json, write_csv
from .env import ZoomEnv
from .pyramid import FeatureConfig, TileAddr, TileFeaturizer, load_slide
from .qlearn import TrainConfig

REPORT_FORMAT = "zoomroi-report/1"


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zoomroi",
        description="Find high-score regions in tiled images by zooming in.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--config", help="feature/pyramid config JSON")
        p.add_argument(
            "--threads",
            type=int,
            default=0,
            help="cap internal parallelism (0 = machine default); outputs "
            "do not depend on it",
        )

    p = sub.add_parser("generate", help="write synthetic slide/mask pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--preset",
        choices=["benchmark", "single"],
        default="benchmark",
        help="benchmark: the fixed 16-slide suite; single: one pair from --spec",
    )
    p.add_argument("--spec", help="SynthSpec JSON (preset: single)")
    add_common(p)

    p = sub.add_parser("score", help="compute a tile reward CSV for one pair")
    p.add_argument("--slide", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--threshold", type=int, default=2, help="mask cancer threshold")
    add_common(p)

    p = sub.add_parser("train", help="train a q-function or score regressor")
    p.add_argument("--mode", choices=["dqn", "linear", "mlp"], required=True)
    p.add_argument("--suite", required=True, help="directory from `generate`")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--approx",
        choices=["tabular", "linear", "mlp"],
        default="mlp",
        help="q-function family for --mode dqn",
    )
    p.add_argument(
        "--slides",
        help="comma-separated training-slide indices to use (default: all)",
    )
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--buffer-capacity", type=int, default=10_000)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument(
        "--samples-per-level", type=int, default=5000, help="tiles per level per slide"
    )
    add_common(p)

    p = sub.add_parser("search", help="select top leaves on one slide")
    p.add_argument("--mode", choices=["greedy", "beam", "scan", "random"], required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="q or model checkpoint JSON")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="score candidates with the true tile reward",
    )
    p.add_argument(
        "--oracle-qstar",
        action="store_true",
        help="score state-action pairs with exact optimal values",
    )
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--top-fraction", type=float, default=0.1, help="scan keep rate")
    add_common(p)

    p = sub.add_parser("evaluate", help="tabulate selection reports")
    p.add_argument("reports", nargs="+", help="report JSON paths")
    p.add_argument("--out", help="optional CSV output path")
    add_common(p)

    return parser


def _feature_config(args):
    if getattr(args, "config", None):
        return FeatureConfig.from_json(args.config)
    return FeatureConfig()


def _run_dict(args):
    skip = {"command"}
    run = {"command": args.command}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        run[key] = value
    return run


def _load_pair(slide_path, mask_path, cfg, threshold=2):
    pyramid = load_slide(slide_path, tile_size=cfg.tile_size)
    mask = scoring.load_mask(
        mask_path, expected_size=(pyramid.width, pyramid.height), threshold=threshold
    )
    return pyramid, scoring.compute_reward_map(pyramid, mask)


def cmd_generate(args):
    if args.preset == "single":
        if not args.spec:
            raise ValueError("--preset single needs --spec")
        spec = synth.SynthSpec.from_dict(load_json(args.spec))
        out = Path(args.out)
        synth.generate(spec, out, "000")
        run = _run_dict(args)
        dump_json(run, out / "000.run.json")
    else:
        synth.benchmark_suite(args.seed, args.out)
        dump_json(_run_dict(args), Path(args.out) / "run.json")
    return 0


def _sidecar(path):
    path = Path(path)
    stem = path.stem if path.suffix else path.name
    return path.with_name(stem + ".run.json")


def cmd_score(args):
    cfg = _feature_config(args)
    _, reward_map = _load_pair(args.slide, args.mask, cfg, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scoring.write_reward_csv(reward_map, out)
    dump_json(_run_dict(args), _sidecar(out))
    return 0


def _suite_entries(suite_dir, split):
    manifest = load_json(Path(suite_dir) / "manifest.json")
    if manifest.get("format") != synth.SUITE_FORMAT:
        raise ValueError("not a generated suite directory")
    return [e for e in manifest["entries"] if e["split"] == split]


def _load_split(args, cfg, split):
    entries = _suite_entries(args.suite, split)
    if split == "train" and args.slides:
        wanted = {int(s) for s in args.slides.split(",")}
        entries = [e for e in entries if e["index"] in wanted]
        if not entries:
            raise ValueError(f"no training slides match --slides {args.slides}")
    loaded = []
    for e in entries:
        pyramid, reward_map = _load_pair(
            Path(args.suite) / e["slide"], Path(args.suite) / e["mask"], cfg
        )
        loaded.append((e, pyramid, reward_map))
    return loaded

def _sample_split(loaded, cfg, n_per_level, seed):
    parts = []
    for e, pyramid, reward_map in loaded:
        featurizer = TileFeaturizer(pyramid, mean=cfg.mean, std=cfg.std)
        parts.append(
            regressor.sample_tiles(
                featurizer,
                reward_map,
                n_per_level,
                seed=seed + e["index"],
                slide_id=e["slide"],
            )
        )
    return regressor.Dataset.concat(parts)


def cmd_train(args):
    cfg = _feature_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _run_dict(args)
    train_loaded = _load_split(args, cfg, "train")

    if args.mode == "dqn":
        envs = [ZoomEnv(m) for _, _, m in train_loaded]
        featurizers = None
        if args.approx == "tabular":
            q = qlearn.TabularQ()
        else:
            featurizers = [
                TileFeaturizer(p, mean=cfg.mean, std=cfg.std)
                for _, p, _ in train_loaded
            ]
            n_features = featurizers[0].n_features
            if args.approx == "linear":
                q = qlearn.LinearQ(n_features)
            else:
                q = qlearn.MlpQ(n_features, seed=args.seed)
        config = TrainConfig(
            learning_rate=args.lr if args.lr is not None else 5e-4,
            batch_size=args.batch_size if args.batch_size is not None else 32,
            iterations=args.iterations if args.iterations is not None else 100_000,
            gamma=args.gamma,
            buffer_capacity=args.buffer_capacity,
            seed=args.seed,
        )
        q, curve = qlearn.train(envs, q, config, featurizers=featurizers)
        run["train_config"] = config.to_dict()
        qlearn.save_q_checkpoint(q, out / "checkpoint.json", config=run)
        qlearn.write_reward_curve_csv(curve, out / "reward_curve.csv")
        dump_json(run, out / "reward_curve.run.json")
        returns = {}
        for i, ((entry, _, _), env) in enumerate(zip(train_loaded, envs)):
            feat = featurizers[i] if featurizers else None
            _, ret = qlearn.greedy_episode(env, q, featurizer=feat)
            returns[entry["slide"]] = ret
        dump_json(
            {"run": run, "greedy_returns": returns}, out / "training_summary.json"
        )
        return 0

    train_data = _sample_split(train_loaded, cfg, args.samples_per_level, args.seed)
    val_loaded = _load_split(args, cfg, "val")
    val_data = _sample_split(val_loaded, cfg, args.samples_per_level, args.seed + 10_000)
    if args.mode == "linear":
        model, curve = regressor.train_linear(
            train_data,
            lr=args.lr if args.lr is not None else 1e-4,
            l2_lambda=args.l2,
            epochs=args.epochs if args.epochs is not None else 200,
            seed=args.seed,
        )
    else:
        model, curve = regressor.train_mlp(
            train_data,
            val_data=val_data,
            lr=args.lr if args.lr is not None else 1e-3,
            batch_size=args.batch_size if args.batch_size is not None else 64,
            epochs=args.epochs if args.epochs is not None else 9,
            seed=args.seed,
        )
    regressor.save_model_checkpoint(model, out / "checkpoint.json", config=run)
    regressor.write_loss_curve_csv(curve, out / "loss_curve.csv")
    dump_json(run, out / "loss_curve.run.json")
    preds = regressor.predict(model, val_data.features)
    regressor.write_prediction_histogram_csv(
        preds, val_data.labels, out / "prediction_histogram.csv"
    )
    dump_json(run, out / "prediction_histogram.run.json")
    return 0


def _make_binding(args, reward_map, featurizer):
    sources = sum([bool(args.checkpoint), args.oracle, args.oracle_qstar])
    if sources != 1:
        raise ValueError("choose exactly one of --checkpoint, --oracle, --oracle-qstar")
    if args.oracle:
        return search.reward_oracle_binding(reward_map), "oracle"
    if args.oracle_qstar:
        qstar = qlearn.backward_induction(reward_map)
        return search.qstar_binding(qstar), "oracle-qstar"
    payload = load_json(args.checkpoint)
    if payload.get("format") == qlearn.CHECKPOINT_FORMAT:
        q = qlearn.load_q_checkpoint(args.checkpoint)
        return search.q_binding(q, featurizer), "q-checkpoint"
    model = regressor.load_model_checkpoint(args.checkpoint)
    return search.value_binding(model, featurizer), "model-checkpoint"


def cmd_search(args):
    if args.k < 1:
        raise ValueError("--k must be >= 1")
    cfg = _feature_config(args)
    pyramid, reward_map = _load_pair(args.slide, args.mask, cfg)
    featurizer = TileFeaturizer(pyramid, mean=cfg.mean, std=cfg.std)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _run_dict(args)

    if args.mode == "random":
        leaves = reward_map.in_image_addrs(reward_map.max_depth)
        if args.k > len(leaves):
            raise ValueError(f"--k {args.k} exceeds {len(leaves)} leaves")
        rng = np.random.default_rng(args.seed)
        picks = rng.choice(len(leaves), size=args.k, replace=False)
        report = search.evaluate_selection([leaves[int(i)] for i in picks], reward_map)
        scorer_name = "random"
    elif args.mode == "scan":
        if args.oracle:
            scorer = lambda addr, feats: reward_map.reward(addr)  # noqa: E731
            scorer_name = "oracle"
        elif args.checkpoint:
            payload = load_json(args.checkpoint)
            if payload.get("format") != regressor.MODEL_FORMAT:
                raise ValueError("scan needs a score-model checkpoint or --oracle")
            model = regressor.load_model_checkpoint(args.checkpoint)
            scorer = regressor.model_scorer(model)
            scorer_name = "model-checkpoint"
        else:
            raise ValueError("scan needs a score-model checkpoint or --oracle")
        selection = regressor.full_scan_select(
            featurizer, scorer, reward_map, args.top_fraction
        )
        report = search.evaluate_selection(list(selection.entries), reward_map)
    elif args.mode == "beam":
        binding, scorer_name = _make_binding(args, reward_map, featurizer)
        report = search.beam_search(
            reward_map, binding, args.k, beam_width=args.beam_width
        )
    else:  # greedy
        binding, scorer_name = _make_binding(args, reward_map, featurizer)
        leaf, trajectory = search.greedy_descend(reward_map, binding)
        score = trajectory[-1][2] if trajectory else None
        report = search.evaluate_selection([(leaf, score)], reward_map)

    payload = {
        "format": REPORT_FORMAT,
        "run": run,
        "mode": args.mode,
        "scorer": scorer_name,
        "k": len(report.entries),
        "beam_width": args.beam_width,
    }
    payload.update(search.report_to_dict(report))
    dump_json(payload, out / "report.json")
    search.render_overlay(pyramid, [e.addr for e in report.entries], out / "overlay.png")
    return 0


def cmd_evaluate(args):
    rows = []
    for path in args.reports:
        payload = load_json(path)
        if payload.get("format") != REPORT_FORMAT:
            raise ValueError(f"{path}: not a selection report")
        hist = payload["histogram"]
        rows.append(
            (
                Path(path).parent.name or Path(path).stem,
                payload["mode"],
                payload["k"],
                float(payload["mean_reward"]),
                float(payload["regret"]),
                hist["zero"],
                hist["partial"],
                hist["full"],
            )
        )
    rows.sort(key=lambda r: -r[3])
    header = "report,mode,k,mean_reward,regret,zero,partial,full"
    print(header)
    for row in rows:
        print(",".join(str(v) for v in row))
    if args.out:
        write_csv(args.out, header, rows)
        dump_json(_run_dict(args), _sidecar(args.out))
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "score": cmd_score,
    "train": cmd_train,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "search" and args.beam_width is not None and args.beam_width < args.k:
        parser.error("--beam-width must be >= --k")
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
