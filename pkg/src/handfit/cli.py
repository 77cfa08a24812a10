"""Command-line pipeline: synth, train, infer, fit, eval, sweep, pipeline."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fit, forest, geometry, metrics, proposals, svgplot, sweeps, synth
from .config import ConfigError, RunConfig
from .depth import CameraIntrinsics, RenderError
from .fit import UnderConstrainedError
from .forest import ForestConfig, ForestFormatError

log = logging.getLogger("handfit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for assignment in args.set or []:
        cfg.set_from_text(assignment)
    if args.scale is not None:
        if not 0 < args.scale <= 1:
            raise ConfigError("--scale must be in (0, 1]")
        cfg["synth.articulations"] = max(1, round(4 * args.scale ** 0.5))
    if args.seed is not None:
        cfg["seed"] = args.seed
    env_seed = os.environ.get("HANDFIT_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"HANDFIT_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def _camera(cfg):
    return CameraIntrinsics(fx=cfg["camera.fx"], fy=cfg["camera.fy"],
                            cx=cfg["camera.cx"], cy=cfg["camera.cy"],
                            width=cfg["camera.width"], height=cfg["camera.height"])


def _forest_config(cfg):
    return ForestConfig(
        num_trees=cfg["forest.num_trees"],
        max_depth=cfg["forest.max_depth"],
        min_samples=cfg["forest.min_samples"],
        node_subsample=cfg["forest.node_subsample"],
        candidates=cfg["forest.candidates"],
        probe_range_px_m=cfg["forest.probe_range_px_m"],
        bg_depth_mm=cfg["forest.bg_depth_mm"],
        leaf_modes=cfg["forest.leaf_modes"],
        leaf_bandwidth_mm=cfg["forest.leaf_bandwidth_mm"],
        leaf_cap=cfg["forest.leaf_cap"],
        meanshift_iters=cfg["forest.meanshift_iters"],
    )


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing inputs: " + ", ".join(missing))


def _dataset_geometry(dataset):
    geo_path = Path(dataset) / "geometry.txt"
    lim_path = Path(dataset) / "limits.txt"
    geom = geometry.HandGeometry.from_file(geo_path) if geo_path.exists() \
        else geometry.HandGeometry.default()
    limits = geometry.JointLimits.from_file(lim_path) if lim_path.exists() \
        else geometry.JointLimits.default()
    return geom, limits


def cmd_synth(args):
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty "
                          "(use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    geom = geometry.HandGeometry.default()
    limits = geometry.JointLimits.default()
    cam = _camera(cfg)
    arts = synth.load_articulations()
    views = synth.load_viewpoints()
    translation = (0.0, 0.0, cfg["synth.distance_mm"])

    train_poses = synth.generate_training_poses(
        arts, views, limits=limits, translation=translation,
        per_finger=cfg["synth.articulations"], num_views=cfg["synth.viewpoints"])
    log.info("rendering %d training frames", len(train_poses))
    rng = np.random.default_rng((cfg["seed"], 1))
    train_imgs = synth.render_poses(train_poses, geom, cam,
                                    jitter_mm=cfg["synth.jitter_mm"], rng=rng)
    synth.write_split(out / "train", train_poses, train_imgs)

    key_rng = np.random.default_rng((cfg["seed"], 2))
    view = views[cfg["synth.test_viewpoint"] % len(views)]
    keyposes = synth.make_track_keyposes(
        key_rng, cfg["synth.test_keyposes"],
        articulations=arts[:, :cfg["synth.articulations"]],
        limits=limits, translation=translation, orientation=view)
    seq = synth.generate_sequence(keyposes, cfg["synth.frames_between"],
                                  cfg["synth.subsample"], limits)
    log.info("rendering %d test frames", len(seq))
    seq_imgs = synth.render_poses(seq, geom, cam,
                                  jitter_mm=cfg["synth.jitter_mm"], rng=rng)
    synth.write_split(out / "test", seq, seq_imgs)

    cam.save(out / "intrinsics.txt")
    geom.save(out / "geometry.txt")
    limits.save(out / "limits.txt")
    cfg.write(out / "config.txt")
    log.info("dataset written to %s (train %d, test %d)", out,
             len(train_poses), len(seq))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    _require(dataset / "train" / "poses.csv", dataset / "intrinsics.txt")
    cam = CameraIntrinsics.from_file(dataset / "intrinsics.txt")
    geom, _ = _dataset_geometry(dataset)
    poses, images = synth.read_split(dataset / "train", cam)
    gts = [geometry.forward_kinematics(geom, p) for p in poses]
    rng = np.random.default_rng((cfg["seed"], 3))
    samples = forest.build_training_set(images, gts, cfg["forest.train_stride"],
                                        rng, cap=cfg["forest.train_cap"])
    log.info("training forest on %d samples from %d frames", len(samples), len(poses))
    model = forest.train_forest(samples, _forest_config(cfg),
                                np.random.default_rng((cfg["seed"], 4)),
                                threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    forest.save_forest(out, model)
    stats = model.stats()
    with open(out.with_suffix(".stats.txt"), "w") as fh:
        for i, s in enumerate(stats):
            line = f"tree {i}: depth {s['depth']}, leaves {s['leaves']}, nodes {s['nodes']}"
            fh.write(line + "\n")
            log.info(line)
    return EXIT_OK


def _infer_frames(model, images, cfg, threads=1):
    def one(img):
        votes = forest.accumulate_votes(model, img,
                                        stride=cfg["forest.infer_stride"],
                                        depth_sq_weight=cfg["forest.depth_sq_weight"])
        return votes, forest.proposals_from_votes(
            votes, top_n=cfg["forest.top_n"], k=cfg["forest.k"],
            bandwidth_mm=cfg["forest.infer_bandwidth_mm"],
            max_iters=cfg["forest.meanshift_iters"])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, images))
    else:
        pairs = [one(img) for img in images]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def cmd_infer(args):
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    split = dataset / args.split
    _require(args.forest, split / "poses.csv", dataset / "intrinsics.txt")
    cam = CameraIntrinsics.from_file(dataset / "intrinsics.txt")
    model = forest.load_forest(args.forest)
    _, images = synth.read_split(split, cam)
    log.info("inferring proposals for %d frames", len(images))
    _, psets = _infer_frames(model, images, cfg, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    proposals.write_proposals_csv(out, psets)
    return EXIT_OK


def cmd_fit(args):
    cfg = _load_config(args)
    _require(args.proposals)
    geom = geometry.HandGeometry.from_file(args.geometry) if args.geometry \
        else geometry.HandGeometry.default()
    limits = geometry.JointLimits.from_file(args.limits) if args.limits \
        else geometry.JointLimits.default()
    psets = proposals.read_proposals_csv(args.proposals)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    frames = []
    fit_results = []
    evals = []
    pso_cfg = sweeps.pso_config(cfg, cfg["seed"])
    for i, pset in enumerate(psets):
        rng = np.random.default_rng((cfg["seed"], 5, i))
        if args.mode == "regression-only":
            frames.append(metrics.top_proposal_joints(pset))
            continue
        if args.mode == "joint":
            res = fit.joint_fit(pset, geom, limits, pso_cfg, rng=rng)
        else:
            res = fit.stepwise_fit(pset, geom, limits, pso_cfg, rng=rng)
        fit_results.append(res)
        frames.append(res.joints(geom))
        evals.append(res.evals)
    write_joints_csv(out / "estimates.csv", frames)
    if fit_results:
        fit.write_fits_csv(out / "poses.csv", fit_results)
        log.info("fitted %d frames, mean %.0f objective evaluations/frame",
                 len(fit_results), float(np.mean(evals)))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    split = dataset / args.split
    _require(args.estimates, split / "poses.csv")
    geom, _ = _dataset_geometry(dataset)
    gt_poses = geometry.read_poses_csv(split / "poses.csv")
    gt_joints = [geometry.forward_kinematics(geom, p) for p in gt_poses]
    estimates = read_joints_csv(args.estimates)
    if len(estimates) != len(gt_joints):
        raise ValueError(f"{args.estimates}: {len(estimates)} frames, "
                         f"ground truth has {len(gt_joints)}")
    results = [metrics.FrameResult.compute(i, est, gt, sentinel=cfg["pso.d_max_mm"])
               for i, (est, gt) in enumerate(zip(estimates, gt_joints))]

    out = Path(args.out) if args.out else Path(f"run_{cfg.content_hash()}")
    out.mkdir(parents=True, exist_ok=True)
    curve = metrics.success_rate_curve(results, cfg.thresholds())
    with open(out / "frame_errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "mean_error_mm", "max_error_mm",
                         "fingertip_error_mm"])
        for r in results:
            tips = list(geometry.TIP_INDICES)
            writer.writerow([r.frame_id, f"{r.errors.mean():.6g}",
                             f"{r.errors.max():.6g}",
                             f"{r.errors[tips].mean():.6g}"])
    with open(out / "success_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_mm", "fraction"])
        for t, f in curve.rows():
            writer.writerow([f"{t:.6g}", f"{f:.6g}"])
    svgplot.line_plot(out / "success_curve.svg",
                      [{"label": "all joints", "x": curve.thresholds,
                        "y": curve.fractions}],
                      title="frame success rate", xlabel="threshold (mm)",
                      ylabel="fraction of frames")
    summary = {
        "frames": len(results),
        "mean_joint_error_mm": metrics.mean_joint_error(results),
        "fingertip_error_mm": metrics.fingertip_error(results),
    }
    with open(out / "summary.txt", "w") as fh:
        for key, value in summary.items():
            fh.write(f"{key} = {value:.6g}\n" if isinstance(value, float)
                     else f"{key} = {value}\n")
    log.info("mean joint error %.2f mm, fingertips %.2f mm",
             summary["mean_joint_error_mm"], summary["fingertip_error_mm"])
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    split = dataset / "test"
    _require(args.forest, split / "poses.csv", dataset / "intrinsics.txt")
    cam = CameraIntrinsics.from_file(dataset / "intrinsics.txt")
    geom, limits = _dataset_geometry(dataset)
    model = forest.load_forest(args.forest)
    poses, images = synth.read_split(split, cam)
    gt_joints = [geometry.forward_kinematics(geom, p) for p in poses]
    log.info("accumulating votes for %d frames", len(images))
    votes = [forest.accumulate_votes(model, img, stride=cfg["forest.infer_stride"],
                                     depth_sq_weight=cfg["forest.depth_sq_weight"])
             for img in images]
    out = Path(args.out) if args.out else Path(f"run_{cfg.content_hash()}")
    rows = sweeps.run_sweep(args.experiment, votes, gt_joints, geom, limits,
                            cfg, out / f"sweep_{args.experiment}")
    log.info("wrote %d sweep rows under %s", len(rows), out)
    return EXIT_OK


def cmd_pipeline(args):
    out = Path(args.out)
    stages = argparse.Namespace(**vars(args))
    stages.out = out / "dataset"
    cmd_synth(stages)
    train_args = argparse.Namespace(**vars(args))
    train_args.dataset = out / "dataset"
    train_args.out = out / "forest.bin"
    cmd_train(train_args)
    infer_args = argparse.Namespace(**vars(args))
    infer_args.dataset = out / "dataset"
    infer_args.forest = out / "forest.bin"
    infer_args.split = "test"
    infer_args.out = out / "proposals.csv"
    cmd_infer(infer_args)
    fit_args = argparse.Namespace(**vars(args))
    fit_args.proposals = out / "proposals.csv"
    fit_args.geometry = out / "dataset" / "geometry.txt"
    fit_args.limits = out / "dataset" / "limits.txt"
    fit_args.mode = args.mode
    fit_args.out = out / "fit"
    cmd_fit(fit_args)
    eval_args = argparse.Namespace(**vars(args))
    eval_args.estimates = out / "fit" / "estimates.csv"
    eval_args.dataset = out / "dataset"
    eval_args.split = "test"
    eval_args.out = out / "eval"
    cmd_eval(eval_args)
    return EXIT_OK


def write_joints_csv(path, frames):
    """Per-frame 21-joint estimates; NaN marks joints without a prediction."""
    header = ["frame"] + [f"{n}_{ax}" for n in geometry.JOINT_NAMES for ax in "xyz"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, joints in enumerate(frames):
            flat = np.asarray(joints, dtype=float).reshape(63)
            writer.writerow([i] + [f"{v:.9g}" for v in flat])


def read_joints_csv(path):
    frames = []
    header = ["frame"] + [f"{n}_{ax}" for n in geometry.JOINT_NAMES for ax in "xyz"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise ValueError(f"{path}:1: unexpected estimates CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 64:
                raise ValueError(f"{path}:{lineno}: expected 64 columns, got {len(row)}")
            frames.append(np.array([float(v) for v in row[1:]]).reshape(21, 3))
    return frames


def _add_common(parser):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--scale", type=float, default=None,
                        help="shrink the training grid (1.0 = full 7168 poses)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel stages")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="handfit",
        description="hybrid hand pose estimation: forest proposals + "
                    "stepwise swarm model fit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the regression forest")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="forest file path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="emit joint proposals for a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="proposals CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fit", help="fit the hand model to proposals")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("stepwise", "joint", "regression-only"),
                   default="stepwise")
    p.add_argument("--geometry")
    p.add_argument("--limits")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score estimates against ground truth")
    p.add_argument("--estimates", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="run directory (default run_<confighash>)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--experiment", choices=sweeps.EXPERIMENTS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--out", help="run directory (default run_<confighash>)")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="synth, train, infer, fit, eval in one go")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--mode", choices=("stepwise", "joint", "regression-only"),
                   default="stepwise")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (RenderError, UnderConstrainedError, ForestFormatError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
