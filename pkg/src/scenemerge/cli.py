"""Command-line entry point: synth, plan, align, track, ba, eval, run.

Each subcommand consumes and produces only interchange artifacts, so any
stage can be swapped with an external tool (including foundation-model
outputs dropped into the cluster directory). Exit codes: 0 success, 2
configuration error, 3 data error, 4 numerical divergence. The MERG3R_LOG
environment variable selects the log level (default WARNING); logs go to
stderr so stdout stays machine-readable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .alignment import build_merged_geometry
from .ba import BAConfig, BAProblem, apply_ba_result, run_ba
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate_trajectories, point_cloud_distance, umeyama_align
from .geometry import CameraPose, apply_sim3, quat_wxyz_to_matrix
from .io_formats import (
    JSON_FORMAT_VERSION,
    plan_document,
    pose_record_from_camera,
    read_plan,
    read_ply,
    read_poses,
    read_tensor,
    read_tracks,
    read_transforms,
    sim3_from_transform_record,
    transform_record_from_sim3,
    write_plan,
    write_ply,
    write_poses,
    write_tracks,
    write_transforms,
)
from .ordering import SimilarityMatrix, plan_scene
from .pipeline import (
    PipelineConfig,
    align_clusters,
    check_plan_matches_clusters,
    load_scene,
    matcher_from_scene_dir,
    run_pipeline,
    synthesize_scene_dir,
    write_loss_csv,
)
from .synthetic import PerturbationSpec
from .tracking import run_tracking

LOG_ENV_VAR = "MERG3R_LOG"

logger = logging.getLogger(__name__)


def _configure_logging() -> None:
    name = os.environ.get(LOG_ENV_VAR, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    if not isinstance(getattr(logging, name, None), int):
        logger.warning("unrecognized %s level %r, using WARNING", LOG_ENV_VAR, name)


def _perturb_spec(name: str) -> PerturbationSpec:
    return PerturbationSpec.none() if name == "none" else PerturbationSpec.default()


def _transforms_for_clusters(records, clusters, path):
    """Transform records matched to clusters by id, in cluster order."""
    by_id = {}
    for rec in records:
        if rec.cluster_id in by_id:
            raise DataError(f"{path} repeats cluster id {rec.cluster_id}")
        by_id[rec.cluster_id] = rec
    out = []
    for cluster in clusters:
        rec = by_id.get(cluster.cluster_id)
        if rec is None:
            raise DataError(f"{path} has no transform for cluster {cluster.cluster_id}")
        out.append(sim3_from_transform_record(rec))
    return out


def _poses_by_frame(records, path) -> dict:
    out = {}
    for rec in records:
        if rec.frame_id in out:
            raise DataError(f"{path} repeats frame id {rec.frame_id}")
        out[rec.frame_id] = CameraPose(
            rotation=quat_wxyz_to_matrix(rec.quat_wxyz), translation=rec.translation
        )
    return out


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return values


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    manifest_path = synthesize_scene_dir(
        args.out,
        seed=args.seed,
        n_cameras=args.cameras,
        n_landmarks=args.landmarks,
        layout=args.layout,
        perturb=_perturb_spec(args.perturb),
        subset_size=args.subset_size,
        overlap=args.overlap,
    )
    print(f"wrote {manifest_path}")


def cmd_plan(args) -> None:
    similarity = SimilarityMatrix(read_tensor(args.similarity))
    plan = plan_scene(
        similarity,
        args.subset_size,
        args.overlap,
        n_subsequences=args.k,
        similarity_constrained=args.similarity_band,
    )
    if args.out is None:
        print(json.dumps(plan_document(plan), indent=2))
    else:
        write_plan(args.out, plan)
        print(f"wrote {args.out} ({len(plan.subsets)} subsets of {plan.subset_size})")


def cmd_align(args) -> None:
    plan = read_plan(args.plan)
    data = load_scene(args.clusters)
    check_plan_matches_clusters(data.clusters, plan)
    transforms, results = align_clusters(data.clusters, args.conf_percentile, args.threads)
    for cluster, res in zip(data.clusters[1:], results):
        logger.info(
            "cluster %d: %d inliers, objective %.6g after %d IRLS iterations",
            cluster.cluster_id,
            res.inlier_count,
            res.final_objective,
            res.iterations_used,
        )
    write_transforms(
        args.out,
        [transform_record_from_sim3(c.cluster_id, t) for c, t in zip(data.clusters, transforms)],
    )
    print(f"wrote {args.out} ({len(transforms)} cluster transforms)")


def cmd_track(args) -> None:
    plan = read_plan(args.plan)
    data = load_scene(args.clusters)
    records = read_transforms(args.transforms)
    transforms = _transforms_for_clusters(records, data.clusters, args.transforms)
    matcher = matcher_from_scene_dir(data.root, args.max_keypoints)
    tracking = run_tracking(
        plan,
        data.similarity,
        data.clusters,
        transforms,
        matcher,
        k=args.k,
        tau_reproj=args.tau,
        max_keypoints=args.max_keypoints,
        threads=args.threads,
    )
    write_tracks(args.out, tracking.tracks)
    print(
        f"wrote {args.out} ({len(tracking.tracks)} tracks from "
        f"{tracking.matcher_invocations} matcher invocations, "
        f"{tracking.failed_edges} failed edges)"
    )


def cmd_ba(args) -> None:
    data = load_scene(args.scene)
    tracks = read_tracks(args.tracks)
    transforms_path = (
        Path(args.transforms)
        if args.transforms is not None
        else Path(args.tracks).parent / "transforms.json"
    )
    if not transforms_path.exists():
        raise DataError(f"{transforms_path} not found; pass --transforms explicitly")
    records = read_transforms(transforms_path)
    transforms = _transforms_for_clusters(records, data.clusters, transforms_path)

    merged = build_merged_geometry(data.clusters, transforms)
    cameras = [merged.camera(fid) for fid in merged.frames()]
    problem = BAProblem.from_tracks(cameras, tracks)
    cfg = BAConfig(iterations=args.iters, initial_lr=args.lr, lambda_exp=args.lambda_exp)
    result = run_ba(problem, cfg)
    refined_cameras, _, cloud = apply_ba_result(result, merged, tracks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_poses(out / "poses_refined.json", [pose_record_from_camera(c) for c in refined_cameras])
    write_loss_csv(out / "ba_loss.csv", result, cfg)
    write_ply(out / "merged.ply", cloud)
    print(
        f"optimized {problem.n_cameras} cameras over {problem.n_points} tracks: "
        f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g} "
        f"(best iteration {result.best_iteration})"
    )
    print(f"wrote poses_refined.json, ba_loss.csv, merged.ply under {out}")


def cmd_eval(args) -> None:
    if (args.pred_cloud is None) != (args.gt_cloud is None):
        raise ConfigError("--pred-cloud and --gt-cloud must be given together")
    est = _poses_by_frame(read_poses(args.est), args.est)
    gt = _poses_by_frame(read_poses(args.gt), args.gt)
    if sorted(est) != sorted(gt):
        raise DataError(f"{args.est} and {args.gt} cover different frame ids")
    frame_ids = sorted(gt)
    est_poses = [est[f] for f in frame_ids]
    gt_poses = [gt[f] for f in frame_ids]
    metrics = evaluate_trajectories(est_poses, gt_poses)
    doc = {
        "format_version": JSON_FORMAT_VERSION,
        "n_cameras": len(frame_ids),
        "trajectory": metrics.to_dict(),
    }
    if args.pred_cloud is not None:
        # The predicted cloud shares the estimated trajectory's frame, so the
        # trajectory's fitted gauge maps it into ground-truth coordinates.
        gauge = umeyama_align(est_poses, gt_poses)
        accuracy, completion = point_cloud_distance(
            apply_sim3(gauge, read_ply(args.pred_cloud).points), read_ply(args.gt_cloud)
        )
        doc["point_cloud"] = {"accuracy": accuracy, "completion": completion}
    print(json.dumps(doc, indent=2))


def cmd_run(args) -> None:
    file_values = _load_config_file(args.config) if args.config is not None else None
    overrides = {
        "subset_size": args.subset_size,
        "overlap": args.overlap,
        "k": args.k,
        "conf_percentile": args.conf_percentile,
        "tau_reproj": args.tau,
        "max_keypoints": args.max_keypoints,
        "ba_iterations": args.iters,
        "ba_lr": args.lr,
        "lambda_exp": args.lambda_exp,
        "threads": args.threads,
        "seed": args.seed,
        "n_subsequences": args.n_subsequences,
        "similarity_constrained": args.similarity_band,
    }
    cfg = PipelineConfig.from_sources(file_values, overrides)
    if args.synth:
        synthesize_scene_dir(
            args.scene,
            seed=cfg.seed,
            n_cameras=args.cameras,
            n_landmarks=args.landmarks,
            layout=args.layout,
            perturb=_perturb_spec(args.perturb),
            subset_size=cfg.subset_size,
            overlap=cfg.overlap,
            n_subsequences=cfg.n_subsequences,
            similarity_constrained=cfg.similarity_constrained,
        )
    result = run_pipeline(args.scene, cfg, out_dir=args.out)
    counts = result.report["counts"]
    print(
        f"merged {result.report['n_images']} images in {result.report['n_subsets']} subsets: "
        f"{counts['tracks']} tracks, {counts['ba_observations']} observations, "
        f"{counts['merged_points']} points"
    )
    if result.metrics is not None:
        traj = result.metrics["trajectory"]
        print(f"ATE {traj['ate']:.6g}, AUC@30 {traj['auc_at_30']:.4f}")
    print(f"wrote artifacts under {args.out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenemerge",
        description="Merge per-subset 3D reconstructions into one global scene.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory with ground truth")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--cameras", type=int, default=200)
    p.add_argument("--landmarks", type=int, default=5000)
    p.add_argument("--layout", choices=("room", "object"), default="room")
    p.add_argument("--perturb", choices=("none", "default"), default="default")
    p.add_argument("--subset-size", type=int, default=100)
    p.add_argument("--overlap", type=int, default=5)
    p.add_argument("--out", required=True, help="scene directory to create")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", help="order frames and partition them into subsets")
    p.add_argument("--similarity", required=True, help="similarity matrix tensor file")
    p.add_argument("--subset-size", type=int, default=100)
    p.add_argument("--overlap", type=int, default=5)
    p.add_argument("--k", type=int, default=None, help="number of interleaved subsequences")
    p.add_argument("--similarity-band", action="store_true",
                   help="constrain the interleave to similarity-banded subsequences")
    p.add_argument("--out", default=None, help="plan JSON path (stdout when omitted)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("align", help="estimate per-cluster Sim(3) transforms")
    p.add_argument("--plan", required=True)
    p.add_argument("--clusters", required=True, help="scene directory with cluster reconstructions")
    p.add_argument("--conf-percentile", type=float, default=70.0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="transforms JSON path")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("track", help="build multi-view tracks across clusters")
    p.add_argument("--plan", required=True)
    p.add_argument("--clusters", required=True, help="scene directory with cluster reconstructions")
    p.add_argument("--transforms", required=True)
    p.add_argument("--k", type=int, default=5, help="frame-graph neighbor count")
    p.add_argument("--tau", type=float, default=8.0, help="reprojection gate in pixels")
    p.add_argument("--max-keypoints", type=int, default=4096)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="tracks binary path")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("ba", help="globally bundle-adjust merged cameras and tracks")
    p.add_argument("--scene", required=True, help="scene directory with cluster reconstructions")
    p.add_argument("--tracks", required=True)
    p.add_argument("--transforms", default=None,
                   help="transforms JSON (default: transforms.json next to --tracks)")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lambda", dest="lambda_exp", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ba)

    p = sub.add_parser("eval", help="trajectory and point-cloud metrics as JSON on stdout")
    p.add_argument("--est", required=True, help="estimated poses JSON")
    p.add_argument("--gt", required=True, help="ground-truth poses JSON")
    p.add_argument("--pred-cloud", default=None, help="predicted point cloud PLY")
    p.add_argument("--gt-cloud", default=None, help="ground-truth point cloud PLY")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline: plan, align, track, ba, eval")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="artifact output directory")
    p.add_argument("--config", default=None, help="JSON config file (flags take precedence)")
    p.add_argument("--synth", action="store_true", help="synthesize the scene directory first")
    p.add_argument("--cameras", type=int, default=200, help="with --synth")
    p.add_argument("--landmarks", type=int, default=5000, help="with --synth")
    p.add_argument("--layout", choices=("room", "object"), default="room", help="with --synth")
    p.add_argument("--perturb", choices=("none", "default"), default="default", help="with --synth")
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="frame-graph neighbor count")
    p.add_argument("--conf-percentile", type=float, default=None)
    p.add_argument("--tau", type=float, default=None, help="reprojection gate in pixels")
    p.add_argument("--max-keypoints", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_exp", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-subsequences", type=int, default=None,
                   help="number of interleaved subsequences")
    p.add_argument("--similarity-band", dest="similarity_band",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="constrain the interleave to similarity-banded subsequences")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e} (iteration {e.iteration})", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
