"""Interchange formats. Everything on disk is little-endian.

Tensor file (.mrgt):

    offset  size  field
    0       4     magic b"MRGT"
    4       2     format version, u16 (currently 1)
    6       1     dtype code, u8 (1 = float32)
    7       1     rank, u8 (1..8)
    8       4*r   dims, u32 each
    ...           payload, row-major float32

    A 2x3 float32 tensor therefore occupies 4 + 2 + 1 + 1 + 8 + 24 = 40 bytes.

Track file (.trk): u64 track count, then per track a 3xf64 point, f64
confidence, u32 observation count, and per observation u32 frame id plus
f64 u, f64 v (subpixel coordinates are preserved exactly).

Point clouds use binary little-endian PLY with float x/y/z, optional uchar
red/green/blue, and optional float "quality" carrying per-point confidence.

Manifests, poses, pairwise transforms, and partition plans are JSON with a
"format_version" field. Quaternions are stored (w, x, y, z); readers reject
quaternions whose norm deviates from 1 by more than 1e-3 and renormalize the
rest. All writers are deterministic: write(read(write(x))) is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataCorruptionError,
    SchemaViolationError,
    UnsupportedVersionError,
)
from .geometry import (
    CameraIntrinsics,
    CameraParams,
    CameraPose,
    PointCloud,
    Sim3Transform,
    matrix_to_quat_wxyz,
    quat_wxyz_to_matrix,
)

TENSOR_MAGIC = b"MRGT"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 1
_MAX_RANK = 8

TRACKS_VERSION = 1
JSON_FORMAT_VERSION = 1
POSE_CONVENTION = "camera_from_world"
_QUAT_NORM_TOL = 1e-3


# ---------------------------------------------------------------------------
# binary tensors


def write_tensor(path, array) -> None:
    """Write an array as a float32 tensor file (values are cast to float32)."""
    a = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if a.ndim < 1 or a.ndim > _MAX_RANK:
        raise SchemaViolationError(f"tensor rank must be 1..{_MAX_RANK}, got {a.ndim}")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise SchemaViolationError(f"tensor dimension exceeds u32 range: {a.shape}")
    p = Path(path)
    with open(p, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<HBB", TENSOR_VERSION, DTYPE_FLOAT32, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back as a float32 array."""
    raw = _read_bytes(path, "tensor")
    if len(raw) < 8:
        raise DataCorruptionError(f"{path}: file shorter than the 8-byte header")
    if raw[:4] != TENSOR_MAGIC:
        raise SchemaViolationError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {TENSOR_MAGIC!r}")
    version, dtype_code, rank = struct.unpack_from("<HBB", raw, 4)
    if version != TENSOR_VERSION:
        raise UnsupportedVersionError(f"{path}: tensor version {version} at offset 4, supported: {TENSOR_VERSION}")
    if dtype_code != DTYPE_FLOAT32:
        raise SchemaViolationError(f"{path}: unknown dtype code {dtype_code} at offset 6")
    if rank < 1 or rank > _MAX_RANK:
        raise SchemaViolationError(f"{path}: rank {rank} at offset 7 outside 1..{_MAX_RANK}")
    dims_end = 8 + 4 * rank
    if len(raw) < dims_end:
        raise DataCorruptionError(f"{path}: truncated dims block (need {dims_end} bytes, have {len(raw)})")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if count * 4 != len(raw) - dims_end:
        raise DataCorruptionError(
            f"{path}: payload is {len(raw) - dims_end} bytes, dims {dims} require {expected - dims_end}"
        )
    return np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end).reshape(dims).copy()


# ---------------------------------------------------------------------------
# scene manifest


@dataclass(frozen=True)
class ImageEntry:
    frame_id: int
    width: int
    height: int
    image_path: str | None = None


@dataclass(frozen=True)
class ClusterEntry:
    """Pointers to one cluster's reconstruction files, relative to the manifest."""

    cluster_id: int
    frame_ids: list[int]
    poses_path: str
    depth_paths: list[str]
    confidence_paths: list[str]

    def __post_init__(self):
        n = len(self.frame_ids)
        if len(self.depth_paths) != n or len(self.confidence_paths) != n:
            raise SchemaViolationError(
                f"cluster {self.cluster_id}: frame_ids/depth_paths/confidence_paths lengths differ "
                f"({n}/{len(self.depth_paths)}/{len(self.confidence_paths)})"
            )


@dataclass(frozen=True)
class SceneManifest:
    images: list[ImageEntry]
    clusters: list[ClusterEntry] = field(default_factory=list)
    similarity_path: str | None = None
    pose_convention: str = POSE_CONVENTION
    units: str = "arbitrary"

    def __post_init__(self):
        if self.pose_convention != POSE_CONVENTION:
            raise SchemaViolationError(
                f"pose_convention is {self.pose_convention!r}, this build requires {POSE_CONVENTION!r}"
            )
        ids = [im.frame_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise SchemaViolationError("manifest field images contains duplicate frame_ids")
        known = set(ids)
        for c in self.clusters:
            missing = [f for f in c.frame_ids if f not in known]
            if missing:
                raise SchemaViolationError(
                    f"cluster {c.cluster_id} references frame_ids absent from images: {missing[:5]}"
                )

    def image_by_frame(self, frame_id: int) -> ImageEntry:
        for im in self.images:
            if im.frame_id == frame_id:
                return im
        raise SchemaViolationError(f"frame_id {frame_id} not present in manifest images")

    def cluster_by_id(self, cluster_id: int) -> ClusterEntry:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise SchemaViolationError(f"cluster_id {cluster_id} not present in manifest clusters")


def write_manifest(path, manifest: SceneManifest) -> None:
    doc = {
        "format_version": JSON_FORMAT_VERSION,
        "pose_convention": manifest.pose_convention,
        "units": manifest.units,
        "similarity_path": manifest.similarity_path,
        "images": [
            {"frame_id": im.frame_id, "width": im.width, "height": im.height, "image_path": im.image_path}
            for im in manifest.images
        ],
        "clusters": [
            {
                "cluster_id": c.cluster_id,
                "frame_ids": list(c.frame_ids),
                "poses_path": c.poses_path,
                "depth_paths": list(c.depth_paths),
                "confidence_paths": list(c.confidence_paths),
            }
            for c in manifest.clusters
        ],
    }
    _write_json(path, doc)


def read_manifest(path) -> SceneManifest:
    doc = _read_json(path, "manifest")
    _check_version(doc, path)
    for key in ("pose_convention", "images", "clusters"):
        if key not in doc:
            raise SchemaViolationError(f"{path}: manifest missing field {key!r}")
    images = [
        ImageEntry(
            frame_id=int(im["frame_id"]),
            width=int(im["width"]),
            height=int(im["height"]),
            image_path=im.get("image_path"),
        )
        for im in doc["images"]
    ]
    clusters = [
        ClusterEntry(
            cluster_id=int(c["cluster_id"]),
            frame_ids=[int(f) for f in c["frame_ids"]],
            poses_path=str(c["poses_path"]),
            depth_paths=[str(p) for p in c["depth_paths"]],
            confidence_paths=[str(p) for p in c["confidence_paths"]],
        )
        for c in doc["clusters"]
    ]
    return SceneManifest(
        images=images,
        clusters=clusters,
        similarity_path=doc.get("similarity_path"),
        pose_convention=str(doc["pose_convention"]),
        units=str(doc.get("units", "arbitrary")),
    )


# ---------------------------------------------------------------------------
# camera poses


@dataclass(frozen=True)
class PoseRecord:
    """Serialized camera: wxyz quaternion + translation + pinhole intrinsics."""

    frame_id: int
    quat_wxyz: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float


def pose_record_from_camera(cam: CameraParams) -> PoseRecord:
    return PoseRecord(
        frame_id=cam.frame_id,
        quat_wxyz=matrix_to_quat_wxyz(cam.pose.rotation),
        translation=np.asarray(cam.pose.translation, dtype=np.float64),
        fx=cam.intrinsics.fx,
        fy=cam.intrinsics.fy,
        cx=cam.intrinsics.cx,
        cy=cam.intrinsics.cy,
    )


def camera_from_pose_record(rec: PoseRecord, width: int, height: int) -> CameraParams:
    return CameraParams(
        intrinsics=CameraIntrinsics(fx=rec.fx, fy=rec.fy, cx=rec.cx, cy=rec.cy, width=width, height=height),
        pose=CameraPose(rotation=quat_wxyz_to_matrix(rec.quat_wxyz), translation=rec.translation),
        frame_id=rec.frame_id,
    )


def write_poses(path, records: list[PoseRecord]) -> None:
    doc = {
        "format_version": JSON_FORMAT_VERSION,
        "poses": [
            {
                "frame_id": r.frame_id,
                "quat_wxyz": [float(x) for x in r.quat_wxyz],
                "translation": [float(x) for x in r.translation],
                "fx": float(r.fx),
                "fy": float(r.fy),
                "cx": float(r.cx),
                "cy": float(r.cy),
            }
            for r in records
        ],
    }
    _write_json(path, doc)


def read_poses(path) -> list[PoseRecord]:
    doc = _read_json(path, "poses")
    _check_version(doc, path)
    if "poses" not in doc:
        raise SchemaViolationError(f"{path}: poses file missing field 'poses'")
    out = []
    for i, p in enumerate(doc["poses"]):
        q = _read_quat(p["quat_wxyz"], f"{path}: poses[{i}].quat_wxyz")
        out.append(
            PoseRecord(
                frame_id=int(p["frame_id"]),
                quat_wxyz=q,
                translation=np.asarray(p["translation"], dtype=np.float64),
                fx=float(p["fx"]),
                fy=float(p["fy"]),
                cx=float(p["cx"]),
                cy=float(p["cy"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# pairwise cluster transforms


@dataclass(frozen=True)
class TransformRecord:
    """Serialized per-cluster Sim(3): scale + wxyz quaternion + translation.

    Records hold the quaternion verbatim so a read/write cycle is
    byte-stable; convert to Sim3Transform for computation.
    """

    cluster_id: int
    scale: float
    quat_wxyz: np.ndarray
    translation: np.ndarray


def transform_record_from_sim3(cluster_id: int, t: Sim3Transform) -> TransformRecord:
    return TransformRecord(
        cluster_id=cluster_id,
        scale=float(t.scale),
        quat_wxyz=matrix_to_quat_wxyz(t.rotation),
        translation=np.asarray(t.translation, dtype=np.float64),
    )


def sim3_from_transform_record(rec: TransformRecord) -> Sim3Transform:
    return Sim3Transform(
        scale=rec.scale,
        rotation=quat_wxyz_to_matrix(rec.quat_wxyz),
        translation=rec.translation,
    )


def write_transforms(path, records: list[TransformRecord]) -> None:
    doc = {
        "format_version": JSON_FORMAT_VERSION,
        "clusters": [
            {
                "cluster_id": int(r.cluster_id),
                "scale": float(r.scale),
                "quat_wxyz": [float(x) for x in r.quat_wxyz],
                "translation": [float(x) for x in r.translation],
            }
            for r in records
        ],
    }
    _write_json(path, doc)


def read_transforms(path) -> list[TransformRecord]:
    doc = _read_json(path, "transforms")
    _check_version(doc, path)
    if "clusters" not in doc:
        raise SchemaViolationError(f"{path}: transforms file missing field 'clusters'")
    out = []
    for i, c in enumerate(doc["clusters"]):
        q = _read_quat(c["quat_wxyz"], f"{path}: clusters[{i}].quat_wxyz")
        out.append(
            TransformRecord(
                cluster_id=int(c["cluster_id"]),
                scale=float(c["scale"]),
                quat_wxyz=q,
                translation=np.asarray(c["translation"], dtype=np.float64),
            )
        )
    return out


def _read_quat(value, where: str) -> np.ndarray:
    """Validate a wxyz quaternion; renormalize only when measurably off.

    Keeping already-normalized quaternions verbatim makes read/write cycles
    byte-stable (dividing by a norm of 1 + 1e-16 would flip last bits).
    """
    q = np.asarray(value, dtype=np.float64)
    if q.shape != (4,):
        raise SchemaViolationError(f"{where} must have 4 entries")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > _QUAT_NORM_TOL:
        raise SchemaViolationError(f"{where} norm {n:.6f} deviates from 1 by more than {_QUAT_NORM_TOL}")
    if abs(n - 1.0) > 1e-12:
        q = q / n
    return q


# ---------------------------------------------------------------------------
# tracks


def write_tracks(path, tracks) -> None:
    """Write tracks (objects with .point, .confidence, .observations)."""
    parts = [struct.pack("<Q", len(tracks))]
    for t in tracks:
        p = np.asarray(t.point, dtype=np.float64)
        parts.append(struct.pack("<3dd I", p[0], p[1], p[2], float(t.confidence), len(t.observations)))
        for frame_id, uv in t.observations:
            parts.append(struct.pack("<Idd", int(frame_id), float(uv[0]), float(uv[1])))
    Path(path).write_bytes(b"".join(parts))


def read_tracks(path):
    """Read a track file; returns a list of tracking.Track."""
    from .tracking import Track  # local import keeps io_formats import-light

    raw = _read_bytes(path, "tracks")
    if len(raw) < 8:
        raise DataCorruptionError(f"{path}: file shorter than the 8-byte track count")
    (count,) = struct.unpack_from("<Q", raw, 0)
    off = 8
    tracks = []
    for ti in range(count):
        if len(raw) < off + 36:
            raise DataCorruptionError(f"{path}: track {ti} header truncated at offset {off}")
        x, y, z, conf, n_obs = struct.unpack_from("<3dd I", raw, off)
        off += 36
        need = off + 20 * n_obs
        if len(raw) < need:
            raise DataCorruptionError(f"{path}: track {ti} observations truncated at offset {off}")
        obs = []
        for _ in range(n_obs):
            frame_id, u, v = struct.unpack_from("<Idd", raw, off)
            obs.append((int(frame_id), np.array([u, v])))
            off += 20
        tracks.append(Track(point=np.array([x, y, z]), confidence=conf, observations=obs))
    if off != len(raw):
        raise DataCorruptionError(f"{path}: {len(raw) - off} trailing bytes after track {count - 1}")
    return tracks


# ---------------------------------------------------------------------------
# PLY point clouds


def write_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY; confidence goes to a float 'quality' property."""
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    props = ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.confidences is not None:
        fields.append(("quality", "<f4"))
        props.append("property float quality")
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
    if cloud.colors is not None:
        rec["red"], rec["green"], rec["blue"] = cloud.colors[:, 0], cloud.colors[:, 1], cloud.colors[:, 2]
    if cloud.confidences is not None:
        rec["quality"] = cloud.confidences
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}", *props, "end_header", ""]
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def read_ply(path) -> PointCloud:
    raw = _read_bytes(path, "PLY")
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SchemaViolationError(f"{path}: not a PLY file (missing 'ply'/'end_header')")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    n = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise SchemaViolationError(f"{path}: unsupported PLY format {tok[1]!r}, need binary_little_endian")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise SchemaViolationError(f"{path}: list property {tok[-1]!r} not supported for vertices")
            if tok[1] not in _PLY_TYPES:
                raise SchemaViolationError(f"{path}: unknown PLY property type {tok[1]!r}")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    if n is None:
        raise SchemaViolationError(f"{path}: PLY header has no vertex element")
    for axis in ("x", "y", "z"):
        if axis not in [f[0] for f in fields]:
            raise SchemaViolationError(f"{path}: PLY vertex element missing property {axis!r}")
    dt = np.dtype(fields)
    if len(body) < n * dt.itemsize:
        raise DataCorruptionError(f"{path}: PLY payload truncated ({len(body)} bytes, need {n * dt.itemsize})")
    rec = np.frombuffer(body, dtype=dt, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    names = [f[0] for f in fields]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    conf = rec["quality"].astype(np.float64) if "quality" in names else None
    return PointCloud(points=pts, colors=colors, confidences=conf)


# ---------------------------------------------------------------------------
# partition plans


def plan_document(plan) -> dict:
    """Plan as the JSON-serializable document written by write_plan."""
    return {
        "format_version": JSON_FORMAT_VERSION,
        "subset_size": int(plan.subset_size),
        "overlap": int(plan.overlap),
        "n_subsequences": int(plan.n_subsequences),
        "pseudo_order": [int(i) for i in plan.pseudo_order],
        "interleaved_order": [int(i) for i in plan.interleaved_order],
        "subsets": [[int(i) for i in s] for s in plan.subsets],
    }


def write_plan(path, plan) -> None:
    _write_json(path, plan_document(plan))


def read_plan(path):
    from .ordering import SceneGraphPlan

    doc = _read_json(path, "plan")
    _check_version(doc, path)
    for key in ("subset_size", "overlap", "pseudo_order", "interleaved_order", "subsets"):
        if key not in doc:
            raise SchemaViolationError(f"{path}: plan missing field {key!r}")
    return SceneGraphPlan(
        pseudo_order=np.asarray(doc["pseudo_order"], dtype=np.int64),
        interleaved_order=np.asarray(doc["interleaved_order"], dtype=np.int64),
        subsets=[np.asarray(s, dtype=np.int64) for s in doc["subsets"]],
        subset_size=int(doc["subset_size"]),
        overlap=int(doc["overlap"]),
        n_subsequences=int(doc["n_subsequences"]),
    )


# ---------------------------------------------------------------------------
# shared JSON plumbing


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _read_bytes(path, kind: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise SchemaViolationError(f"{path}: {kind} file not found") from None


def _read_json(path, kind: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SchemaViolationError(f"{path}: {kind} file not found") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataCorruptionError(f"{path}: invalid JSON in {kind} file: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaViolationError(f"{path}: {kind} file must contain a JSON object")
    return doc


def _check_version(doc, path) -> None:
    v = doc.get("format_version")
    if v != JSON_FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format_version {v!r}, supported: {JSON_FORMAT_VERSION}")
