"""Trajectory and point-cloud evaluation metrics.

Pairwise angular accuracies (RRA/RTA/AUC) follow the convention common in
recent multi-view pose benchmarks: over all unordered camera pairs, the
rotation error is the geodesic angle between estimated and ground-truth
relative rotations, and the translation error is the angle between the
relative-translation directions (scale-free). RRA@tau / RTA@tau count the
percentage of pairs with error <= tau degrees; AUC@30 is the normalized
trapezoid area of min(RRA@t, RTA@t) over integer degrees t in [0, 30].

Absolute metrics align the estimate to the ground truth with a closed-form
similarity fit on camera centers first: ATE is the RMSE of aligned center
distances, RRE/RTE are mean relative-pose rotation (degrees) / translation
(aligned scene units) errors over consecutive frame pairs. ATE and RTE
carry scene units, so a similarity gauge applied to BOTH trajectories
scales them by the gauge scale; the angular metrics are invariant.

Translation direction angles use atan2(||u x v||, u . v): bitwise-equal
directions give exactly zero, which keeps AUC@30 at exactly 100 for a
perfect trajectory (an arccos formulation leaves ~1e-6 degree noise that
a zero threshold would count as a miss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .alignment import weighted_umeyama
from .errors import DataError
from .geometry import (
    CameraPose,
    PointCloud,
    Sim3Transform,
    apply_sim3,
    rotation_distance,
)

AUC_MAX_DEGREES = 30
DEFAULT_THRESHOLDS = (5, 15, 30)


@dataclass(frozen=True)
class PairwiseAccuracy:
    """RRA/RTA percentages keyed by threshold, plus AUC@30.

    Iterates as the 3-tuple (rra_at, rta_at, auc_at_30); pairs whose
    ground-truth relative translation has zero length are excluded from
    the denominators and counted in skipped_pairs.
    """

    rra_at: dict
    rta_at: dict
    auc_at_30: float
    skipped_pairs: int = 0

    def __iter__(self):
        return iter((self.rra_at, self.rta_at, self.auc_at_30))


@dataclass(frozen=True)
class TrajectoryMetrics:
    """Full camera-trajectory report; percentages live in [0, 100]."""

    ate: float
    rre: float
    rte: float
    rra_at: dict
    rta_at: dict
    auc_at_30: float

    def __post_init__(self):
        if not (np.isfinite(self.ate) and self.ate >= 0):
            raise DataError(f"ate must be finite and >= 0, got {self.ate}")
        for name, mapping in (("rra_at", self.rra_at), ("rta_at", self.rta_at)):
            for tau, pct in mapping.items():
                if not 0.0 <= pct <= 100.0:
                    raise DataError(f"{name}[{tau}] = {pct} outside [0, 100]")
        if not 0.0 <= self.auc_at_30 <= 100.0:
            raise DataError(f"auc_at_30 = {self.auc_at_30} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "ate": self.ate,
            "rre": self.rre,
            "rte": self.rte,
            "rra_at": {str(k): v for k, v in self.rra_at.items()},
            "rta_at": {str(k): v for k, v in self.rta_at.items()},
            "auc_at_30": self.auc_at_30,
        }


def _pose_of(entry) -> CameraPose:
    if isinstance(entry, CameraPose):
        return entry
    pose = getattr(entry, "pose", None)
    if isinstance(pose, CameraPose):
        return pose
    raise DataError(f"expected CameraPose or an object with a .pose, got {type(entry).__name__}")


def _pose_lists(est, gt):
    if len(est) != len(gt):
        raise DataError(f"est and gt must be parallel, got {len(est)} vs {len(gt)} poses")
    return [_pose_of(e) for e in est], [_pose_of(g) for g in gt]


def _centers(poses) -> np.ndarray:
    return np.stack([p.center for p in poses])


def _relative_translation(pose_i: CameraPose, pose_j: CameraPose) -> np.ndarray:
    """Translation of the j-from-i relative motion, t_j - R_j R_i^T t_i."""
    return pose_j.translation - pose_j.rotation @ pose_i.rotation.T @ pose_i.translation


def _direction_angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between directions via atan2(||u x v||, u . v); exact at 0 and pi."""
    un = u / np.linalg.norm(u)
    vn = v / np.linalg.norm(v)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(un, vn)), np.dot(un, vn))))


def umeyama_align(est, gt) -> Sim3Transform:
    """Closed-form similarity minimizing sum ||gt_center - T(est_center)||^2.

    Needs >= 3 poses with non-collinear centers; raises
    DegenerateGeometryError otherwise.
    """
    est, gt = _pose_lists(est, gt)
    return weighted_umeyama(_centers(gt), _centers(est), np.ones(len(est)))


def pairwise_relative_accuracy(est, gt, thresholds=DEFAULT_THRESHOLDS) -> PairwiseAccuracy:
    """RRA@tau / RTA@tau / AUC@30 over all unordered camera pairs.

    Pairs with a zero-length ground-truth relative translation are skipped
    wholesale (both accuracies, same denominator); a zero-length estimated
    translation against a nonzero ground truth counts as a 180 degree
    direction error.
    """
    est, gt = _pose_lists(est, gt)
    if len(est) < 2:
        raise DataError(f"need >= 2 poses for pairwise accuracy, got {len(est)}")
    for tau in thresholds:
        if not tau > 0:
            raise DataError(f"thresholds must be positive, got {tau}")

    rot_errs, dir_errs = [], []
    skipped = 0
    for i in range(len(est)):
        for j in range(i + 1, len(est)):
            t_gt = _relative_translation(gt[i], gt[j])
            if np.linalg.norm(t_gt) == 0.0:
                skipped += 1
                continue
            rel_est = est[j].rotation @ est[i].rotation.T
            rel_gt = gt[j].rotation @ gt[i].rotation.T
            rot_errs.append(np.degrees(rotation_distance(rel_est, rel_gt)))
            t_est = _relative_translation(est[i], est[j])
            if np.linalg.norm(t_est) == 0.0:
                dir_errs.append(180.0)
            else:
                dir_errs.append(_direction_angle_deg(t_est, t_gt))
    if not rot_errs:
        raise DataError("every camera pair has a zero-length ground-truth relative translation")

    rot_errs = np.array(rot_errs)
    dir_errs = np.array(dir_errs)
    n = len(rot_errs)

    def pct(errors, tau):
        return 100.0 * (float(np.count_nonzero(errors <= tau)) / n)

    rra_at = {tau: pct(rot_errs, tau) for tau in thresholds}
    rta_at = {tau: pct(dir_errs, tau) for tau in thresholds}
    curve = np.array(
        [min(pct(rot_errs, t), pct(dir_errs, t)) for t in range(AUC_MAX_DEGREES + 1)]
    )
    auc = (0.5 * (curve[0] + curve[-1]) + float(np.sum(curve[1:-1]))) / AUC_MAX_DEGREES
    return PairwiseAccuracy(rra_at=rra_at, rta_at=rta_at, auc_at_30=auc, skipped_pairs=skipped)


def trajectory_errors(est, gt):
    """(ate, rre, rte) after similarity alignment of est onto gt.

    ATE is the RMSE of aligned camera-center distances; RRE (degrees) and
    RTE (aligned scene units) average relative-pose errors over consecutive
    frame pairs in trajectory order.
    """
    est, gt = _pose_lists(est, gt)
    t = weighted_umeyama(_centers(gt), _centers(est), np.ones(len(est)))
    residual = apply_sim3(t, _centers(est)) - _centers(gt)
    ate = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))

    # Aligning a trajectory leaves relative rotations untouched and scales
    # relative translations by the fitted scale (exact identities), so both
    # are computed from the raw estimate; this keeps est == gt at exactly
    # zero instead of picking up alignment rounding noise.
    rres, rtes = [], []
    for i in range(len(est) - 1):
        rel_est = est[i + 1].rotation @ est[i].rotation.T
        rel_gt = gt[i + 1].rotation @ gt[i].rotation.T
        rres.append(np.degrees(rotation_distance(rel_est, rel_gt)))
        rtes.append(
            float(np.linalg.norm(t.scale * _relative_translation(est[i], est[i + 1]) - _relative_translation(gt[i], gt[i + 1])))
        )
    return ate, float(np.mean(rres)), float(np.mean(rtes))


def evaluate_trajectories(est, gt, thresholds=DEFAULT_THRESHOLDS) -> TrajectoryMetrics:
    """Full metric bundle: absolute errors plus pairwise accuracies."""
    ate, rre, rte = trajectory_errors(est, gt)
    acc = pairwise_relative_accuracy(est, gt, thresholds)
    return TrajectoryMetrics(
        ate=ate,
        rre=rre,
        rte=rte,
        rra_at=acc.rra_at,
        rta_at=acc.rta_at,
        auc_at_30=acc.auc_at_30,
    )


def point_cloud_distance(pred, gt):
    """(accuracy, completion): mean nearest-neighbor distance pred->gt and gt->pred.

    With pred equal to gt plus one outlier whose nearest true point lies at
    distance D, accuracy is D / (m + 1) for m ground-truth points and
    completion is 0. Swapping the arguments swaps the two outputs exactly.
    """
    p = pred.points if isinstance(pred, PointCloud) else np.asarray(pred, dtype=np.float64)
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    for name, arr in (("pred", p), ("gt", g)):
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DataError(f"{name} cloud must have shape (N, 3), got {arr.shape}")
        if len(arr) == 0:
            raise DataError(f"{name} cloud is empty")
    accuracy = float(np.mean(cKDTree(g).query(p)[0]))
    completion = float(np.mean(cKDTree(p).query(g)[0]))
    return accuracy, completion
