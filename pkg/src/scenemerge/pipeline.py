"""End-to-end merge pipeline: plan, align, track, refine, evaluate.

Each stage consumes and produces interchange artifacts, so a pipeline run
is reproducible stage by stage from cached files. With a fixed seed and
thread count every artifact is byte-identical across runs; worker pools
only parallelize per-pair work and reduce results in task order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .alignment import (
    build_merged_geometry,
    chain_alignments,
    estimate_sim3_irls,
    extract_overlap_correspondences,
)
from .ba import BAConfig, BAProblem, apply_ba_result, run_ba
from .clusters import load_cluster
from .errors import ConfigError, DataError, SceneMergeError
from .evaluation import evaluate_trajectories, point_cloud_distance, umeyama_align
from .geometry import PointCloud, Sim3Transform, apply_sim3
from .io_formats import (
    JSON_FORMAT_VERSION,
    camera_from_pose_record,
    pose_record_from_camera,
    read_manifest,
    read_ply,
    read_poses,
    read_tensor,
    sim3_from_transform_record,
    transform_record_from_sim3,
    write_plan,
    write_ply,
    write_poses,
    write_tracks,
    write_transforms,
)
from .ordering import SimilarityMatrix, plan_scene
from .synthetic import (
    PerturbationSpec,
    generate_scene,
    render_cluster,
    synthetic_matcher,
    synthetic_similarity,
    write_scene,
)
from .tracking import run_tracking

SYNTH_RECORD_NAME = "synth.json"


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for every stage; defaults follow the reference recipe."""

    subset_size: int = 100
    overlap: int = 5
    k: int = 5
    conf_percentile: float = 70.0
    tau_reproj: float = 8.0
    max_keypoints: int = 4096
    ba_iterations: int = 300
    ba_lr: float = 3e-3
    lambda_exp: float = 0.5
    threads: int = 1
    seed: int = 0
    n_subsequences: int | None = None
    similarity_constrained: bool = False

    def __post_init__(self):
        if self.subset_size < 2:
            raise ConfigError(f"subset_size must be >= 2, got {self.subset_size}")
        if not 0 <= self.overlap < self.subset_size:
            raise ConfigError(
                f"overlap must be in [0, subset_size), got {self.overlap} with subset_size {self.subset_size}"
            )
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.conf_percentile < 100:
            raise ConfigError(f"conf_percentile must be in [0, 100), got {self.conf_percentile}")
        if self.tau_reproj <= 0:
            raise ConfigError(f"tau_reproj must be positive, got {self.tau_reproj}")
        if self.max_keypoints < 1:
            raise ConfigError(f"max_keypoints must be >= 1, got {self.max_keypoints}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self.ba_config()  # validates the BA fields

    def ba_config(self) -> BAConfig:
        return BAConfig(
            iterations=self.ba_iterations,
            initial_lr=self.ba_lr,
            lambda_exp=self.lambda_exp,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_sources(cls, file_values: dict | None = None, overrides: dict | None = None) -> "PipelineConfig":
        """Merge with precedence overrides > file_values > defaults.

        None entries mean "not given" and never shadow a lower layer.
        """
        known = {f.name for f in fields(cls)}
        values = {}
        for layer in (file_values or {}, overrides or {}):
            for key, val in layer.items():
                if key not in known:
                    raise ConfigError(f"unknown config field {key!r}")
                if val is not None:
                    values[key] = val
        return cls(**values)


@dataclass
class SceneData:
    """A scene directory loaded into memory."""

    root: Path
    manifest_path: Path
    manifest: object
    clusters: list
    similarity: SimilarityMatrix

    @property
    def n_images(self) -> int:
        return len(self.manifest.images)


@dataclass
class PipelineResult:
    """Everything a run produced, before and after serialization."""

    plan: object
    transforms: list
    transform_records: list
    alignments: list
    tracking: object
    ba: object
    cameras: list
    tracks: list
    cloud: PointCloud
    metrics: dict | None
    report: dict


def load_scene(scene_dir) -> SceneData:
    """Read manifest, similarity matrix, and every cluster reconstruction."""
    root = Path(scene_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root} does not contain a manifest.json")
    manifest = read_manifest(manifest_path)
    if manifest.similarity_path is None:
        raise DataError(f"{manifest_path} lists no similarity matrix")
    if not manifest.clusters:
        raise DataError(f"{manifest_path} lists no cluster reconstructions")
    similarity = SimilarityMatrix(read_tensor(root / manifest.similarity_path))
    if similarity.n != len(manifest.images):
        raise DataError(
            f"similarity matrix is {similarity.n}x{similarity.n} but the manifest lists {len(manifest.images)} images"
        )
    clusters = [load_cluster(manifest_path, c.cluster_id) for c in manifest.clusters]
    return SceneData(
        root=root,
        manifest_path=manifest_path,
        manifest=manifest,
        clusters=clusters,
        similarity=similarity,
    )


def synthesize_scene_dir(
    out_dir,
    seed: int = 42,
    n_cameras: int = 200,
    n_landmarks: int = 5000,
    layout: str = "room",
    perturb: PerturbationSpec | None = None,
    subset_size: int = 100,
    overlap: int = 5,
    n_subsequences: int | None = None,
    similarity_constrained: bool = False,
) -> Path:
    """Generate a scene, partition it, render per-subset clusters, and
    write the full interchange layout plus the gt/ directory.

    gt/synth.json records the generation parameters so later stages can
    rebuild the deterministic synthetic matcher from the directory alone.
    Returns the manifest path.
    """
    perturb = perturb if perturb is not None else PerturbationSpec.default()
    scene = generate_scene(seed, n_cameras=n_cameras, n_landmarks=n_landmarks, layout=layout)
    # The tensor file stores float32, so plan from the rounded values: a
    # reader recomputing the plan from the written similarity must get the
    # exact partition the clusters were rendered with, and float64-vs-float32
    # can flip near-ties in the greedy ordering.
    similarity = SimilarityMatrix(
        synthetic_similarity(scene).values.astype(np.float32)
    )
    plan = plan_scene(
        similarity,
        subset_size,
        overlap,
        n_subsequences=n_subsequences,
        similarity_constrained=similarity_constrained,
    )
    clusters, warps = [], []
    for cid, subset in enumerate(plan.subsets):
        c, w = render_cluster(scene, [int(i) for i in subset], perturb, cluster_id=cid)
        clusters.append(c)
        warps.append(w)
    manifest_path = write_scene(out_dir, scene, clusters, similarity, warps=warps)
    record = {
        "format_version": JSON_FORMAT_VERSION,
        "seed": seed,
        "n_cameras": n_cameras,
        "n_landmarks": n_landmarks,
        "layout": layout,
        "subset_size": subset_size,
        "overlap": overlap,
        "perturb": {
            "per_cluster_sim3_noise": list(perturb.per_cluster_sim3_noise),
            "depth_noise_sigma": perturb.depth_noise_sigma,
            "confidence_model": perturb.confidence_model,
            "match_pixel_noise_sigma": perturb.match_pixel_noise_sigma,
            "outlier_match_fraction": perturb.outlier_match_fraction,
        },
    }
    synth_path = Path(out_dir) / "gt" / SYNTH_RECORD_NAME
    synth_path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def matcher_from_scene_dir(scene_dir, max_keypoints: int = 4096):
    """Rebuild the deterministic synthetic matcher recorded at synth time.

    Regenerates the ground-truth scene from gt/synth.json; raises DataError
    when the record is absent (real scenes need a caller-supplied matcher).
    """
    path = Path(scene_dir) / "gt" / SYNTH_RECORD_NAME
    if not path.exists():
        raise DataError(
            f"{scene_dir} has no gt/{SYNTH_RECORD_NAME}; supply a matcher for non-synthetic scenes"
        )
    record = json.loads(path.read_text(encoding="utf-8"))
    try:
        scene = generate_scene(
            record["seed"],
            n_cameras=record["n_cameras"],
            n_landmarks=record["n_landmarks"],
            layout=record["layout"],
        )
        perturb = PerturbationSpec(
            per_cluster_sim3_noise=tuple(record["perturb"]["per_cluster_sim3_noise"]),
            depth_noise_sigma=record["perturb"]["depth_noise_sigma"],
            confidence_model=record["perturb"]["confidence_model"],
            match_pixel_noise_sigma=record["perturb"]["match_pixel_noise_sigma"],
            outlier_match_fraction=record["perturb"]["outlier_match_fraction"],
        )
    except KeyError as e:
        raise DataError(f"{path}: synthetic record missing field {e}") from None
    return synthetic_matcher(scene, perturb, max_keypoints=max_keypoints)


def align_clusters(clusters, conf_percentile: float = 70.0, threads: int = 1):
    """Robust Sim(3) for each consecutive cluster pair, chained to cluster 0.

    Returns (per-cluster transforms into the global frame, per-pair
    AlignmentResult list). Pair problems run on a thread pool when
    threads > 1; results are reduced in pair order, so output does not
    depend on the thread count.
    """
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if not clusters:
        raise ConfigError("no clusters to align")
    if len(clusters) == 1:
        return [Sim3Transform.identity()], []

    def solve(i: int):
        corr = extract_overlap_correspondences(clusters[i], clusters[i + 1], conf_percentile)
        return estimate_sim3_irls(corr)

    indices = range(len(clusters) - 1)
    if threads == 1:
        results = [solve(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, indices))
    return chain_alignments(results), results


@contextmanager
def _stage(name: str, timings: dict):
    """Time a pipeline stage and tag any pipeline error with its name.

    Exceptions keep their type and extra attributes; only args[0] gains
    the stage prefix, so exit-code mapping and message matching still work.
    """
    start = time.perf_counter()
    try:
        yield
    except SceneMergeError as e:
        if e.args and isinstance(e.args[0], str):
            e.args = (f"{name} stage: {e.args[0]}",) + e.args[1:]
        raise
    finally:
        timings[name] = time.perf_counter() - start


def check_plan_matches_clusters(clusters, plan) -> None:
    """Raise ConfigError unless clusters are exactly the plan's subsets."""
    if len(clusters) != len(plan.subsets):
        raise ConfigError(
            f"scene has {len(clusters)} clusters but the plan produces {len(plan.subsets)} subsets; "
            "partition settings do not match the reconstruction layout"
        )
    for idx, cluster in enumerate(clusters):
        if list(cluster.frame_ids) != [int(i) for i in plan.subsets[idx]]:
            raise ConfigError(f"cluster {cluster.cluster_id} frames do not match plan subset {idx}")


def _gt_cameras_for(data: SceneData, frame_ids):
    """Ground-truth cameras matching frame_ids, or None without a gt/ dir."""
    gt_path = data.root / "gt" / "poses.json"
    if not gt_path.exists():
        return None
    records = {r.frame_id: r for r in read_poses(gt_path)}
    missing = [f for f in frame_ids if f not in records]
    if missing:
        raise DataError(f"gt poses missing frames {missing[:5]}")
    cams = []
    for fid in frame_ids:
        image = data.manifest.image_by_frame(fid)
        cams.append(camera_from_pose_record(records[fid], image.width, image.height))
    return cams


def evaluate_run(data: SceneData, cameras, cloud: PointCloud | None) -> dict | None:
    """Metrics against the gt/ directory; None when the scene has no GT.

    The merged cloud shares the estimated trajectory's coordinate frame, so
    the trajectory's fitted Sim(3) gauge is applied to it before comparing
    against the ground-truth landmarks.
    """
    gt_cams = _gt_cameras_for(data, [c.frame_id for c in cameras])
    if gt_cams is None:
        return None
    metrics = {"trajectory": evaluate_trajectories(cameras, gt_cams).to_dict()}
    gt_cloud_path = data.root / "gt" / "landmarks.ply"
    if cloud is not None and len(cloud.points) and gt_cloud_path.exists():
        gauge = umeyama_align(cameras, gt_cams)
        accuracy, completion = point_cloud_distance(
            apply_sim3(gauge, cloud.points), read_ply(gt_cloud_path)
        )
        metrics["point_cloud"] = {"accuracy": accuracy, "completion": completion}
    return metrics


def run_pipeline(
    scene_dir,
    config: PipelineConfig | None = None,
    out_dir=None,
    matcher=None,
) -> PipelineResult:
    """plan -> align -> track -> bundle-adjust -> evaluate, with timings.

    Writes the artifact set into out_dir when given (plan.json,
    transforms.json, tracks.bin, poses_refined.json, merged.ply,
    ba_loss.csv, metrics.json when GT is present, report.json).
    """
    cfg = config if config is not None else PipelineConfig()
    timings = {}

    with _stage("load", timings):
        data = load_scene(scene_dir)

    with _stage("plan", timings):
        plan = plan_scene(
            data.similarity,
            cfg.subset_size,
            cfg.overlap,
            n_subsequences=cfg.n_subsequences,
            similarity_constrained=cfg.similarity_constrained,
        )
        check_plan_matches_clusters(data.clusters, plan)

    with _stage("align", timings):
        chained, alignments = align_clusters(data.clusters, cfg.conf_percentile, cfg.threads)
        # Canonicalize through the serialized record: rotation -> quaternion
        # -> rotation loses ~1e-16, so later stages must consume exactly what
        # a reader of transforms.json reconstructs, or a stage-by-stage run
        # from cached files would drift from the end-to-end run by ulps.
        transform_records = [
            transform_record_from_sim3(c.cluster_id, t) for c, t in zip(data.clusters, chained)
        ]
        transforms = [sim3_from_transform_record(r) for r in transform_records]

    with _stage("track", timings):
        if matcher is None:
            matcher = matcher_from_scene_dir(data.root, cfg.max_keypoints)
        tracking = run_tracking(
            plan,
            data.similarity,
            data.clusters,
            transforms,
            matcher,
            k=cfg.k,
            tau_reproj=cfg.tau_reproj,
            max_keypoints=cfg.max_keypoints,
            threads=cfg.threads,
        )

    with _stage("ba", timings):
        merged = build_merged_geometry(data.clusters, transforms)
        cameras = [merged.camera(fid) for fid in merged.frames()]
        problem = BAProblem.from_tracks(cameras, tracking.tracks)
        ba_result = run_ba(problem, cfg.ba_config())
        refined_cameras, refined_tracks, cloud = apply_ba_result(ba_result, merged, tracking.tracks)

    with _stage("eval", timings):
        metrics = evaluate_run(data, refined_cameras, cloud)

    n = data.n_images
    k_subsets = len(plan.subsets)
    report = {
        "format_version": JSON_FORMAT_VERSION,
        "n_images": n,
        "subset_size": cfg.subset_size,
        "overlap": cfg.overlap,
        "n_subsets": k_subsets,
        "pair_count": {
            "k_t_squared": k_subsets * cfg.subset_size**2,
            "n_squared": n**2,
            "ratio": k_subsets * cfg.subset_size**2 / n**2,
        },
        "counts": {
            "matcher_invocations": tracking.matcher_invocations,
            "failed_edges": tracking.failed_edges,
            "tracks": len(tracking.tracks),
            "ba_observations": problem.n_observations,
            "merged_points": int(len(cloud.points)),
        },
        "timings_sec": timings,
        "config": cfg.to_dict(),
    }

    result = PipelineResult(
        plan=plan,
        transforms=transforms,
        transform_records=transform_records,
        alignments=alignments,
        tracking=tracking,
        ba=ba_result,
        cameras=refined_cameras,
        tracks=refined_tracks,
        cloud=cloud,
        metrics=metrics,
        report=report,
    )
    if out_dir is not None:
        write_run_artifacts(out_dir, result, cfg)
    return result


def write_loss_csv(path, ba_result, cfg: BAConfig) -> None:
    """History as CSV rows (iteration, lr, loss); row 0 is the initial loss."""
    lines = ["iteration,lr,loss"]
    for i, loss in enumerate(ba_result.loss_history):
        lines.append(f"{i},{cfg.learning_rate(i):.10e},{loss:.17e}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_run_artifacts(out_dir, result: PipelineResult, cfg: PipelineConfig) -> dict:
    """Serialize every stage output; returns {artifact name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["plan"] = out / "plan.json"
    write_plan(paths["plan"], result.plan)
    paths["transforms"] = out / "transforms.json"
    write_transforms(paths["transforms"], result.transform_records)
    paths["tracks"] = out / "tracks.bin"
    write_tracks(paths["tracks"], result.tracking.tracks)
    paths["poses"] = out / "poses_refined.json"
    write_poses(paths["poses"], [pose_record_from_camera(c) for c in result.cameras])
    paths["cloud"] = out / "merged.ply"
    write_ply(paths["cloud"], result.cloud)
    paths["ba_loss"] = out / "ba_loss.csv"
    write_loss_csv(paths["ba_loss"], result.ba, cfg.ba_config())
    if result.metrics is not None:
        paths["metrics"] = out / "metrics.json"
        paths["metrics"].write_text(json.dumps(result.metrics, indent=2) + "\n", encoding="utf-8")
    paths["report"] = out / "report.json"
    paths["report"].write_text(json.dumps(result.report, indent=2) + "\n", encoding="utf-8")
    return paths
