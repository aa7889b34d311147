"""Synthetic ground truth: a posed five-point 3D head seen by a fake detector.

Head frame (units of head radius): x toward the subject's left, y down, z
forward out of the face. The camera looks along -z, projection is
orthographic, image x = x and image y = y (pixels, y down), so a frontal face
shows its right eye on the image left.

Pose angles, in degrees:

* yaw   -- turn about the vertical axis; positive turns the face toward +x
* pitch -- positive looks up (toward -y in the image)
* roll  -- in-plane tilt, positive is clockwise on screen

The gaze label is the head's forward axis after rotation, projected to the
image plane and normalized.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Record, dumps_record
from .errors import DegenerateLabel, ValidationError
from .features import N_SLOTS, GazeLabel, LabelSource, PersonDetections, label_angle

HEAD_POINTS = np.array([
    [0.0, 0.15, 0.95],     # nose
    [-0.35, -0.25, 0.80],  # right eye
    [0.35, -0.25, 0.80],   # left eye
    [-0.95, 0.0, 0.0],     # right ear
    [0.95, 0.0, 0.0],      # left ear
])
HEAD_NORMALS = HEAD_POINTS / np.linalg.norm(HEAD_POINTS, axis=1, keepdims=True)
FORWARD = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SynthParams:
    n_samples: int = 1000
    seed: int = 0
    yaw_range: tuple[float, float] = (-180.0, 180.0)
    pitch_range: tuple[float, float] = (-25.0, 25.0)
    roll_range: tuple[float, float] = (-15.0, 15.0)
    scale_range: tuple[float, float] = (15.0, 60.0)
    image_size: tuple[int, int] = (640, 480)
    coord_noise: float = 0.5
    visibility_threshold: float = -0.3
    conf_base: float = 0.55
    conf_slope: float = 0.4
    conf_noise: float = 0.08
    conf_min: float = 0.01
    distortion: float = 0.0
    camera: str = "synth"
    frames_per_sequence: int = 1

    def __post_init__(self):
        for name in ("yaw_range", "pitch_range", "roll_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValidationError(f"range must satisfy min <= max, got ({lo}, {hi})", name)
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale_range[0] <= 0:
            raise ValidationError("scale must be positive", "scale_range")
        if int(self.n_samples) < 1:
            raise ValidationError("must be >= 1", "n_samples")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValidationError("must be positive", "image_size")
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if self.coord_noise < 0 or self.conf_noise < 0:
            raise ValidationError("noise must be >= 0", "coord_noise" if self.coord_noise < 0 else "conf_noise")
        if not 0 < self.conf_min <= 1:
            raise ValidationError("must be in (0, 1]", "conf_min")
        if int(self.frames_per_sequence) < 1:
            raise ValidationError("must be >= 1", "frames_per_sequence")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown field(s) {sorted(unknown)}", sorted(unknown)[0])
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        try:
            return cls(**doc)
        except ValidationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """``R_yaw @ R_pitch @ R_roll`` (degrees)."""
    y, p, r = np.radians([yaw, pitch, roll])
    cy, sy, cp, sp, cr, sr = np.cos(y), np.sin(y), np.cos(p), np.sin(p), np.cos(r), np.sin(r)
    r_yaw = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_pitch = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    r_roll = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return r_yaw @ r_pitch @ r_roll


@dataclass(frozen=True)
class Projection:
    points: np.ndarray   # (5, 2) pixels
    facing: np.ndarray   # (5,) camera-facing component of each keypoint normal
    gaze: np.ndarray     # (2,) unit label


def project_head(yaw: float, pitch: float, roll: float, scale: float, center=(0.0, 0.0)) -> Projection:
    if not all(math.isfinite(v) for v in (yaw, pitch, roll)):
        raise ValidationError("rotation angles must be finite")
    if not scale > 0:
        raise ValidationError("scale must be positive", "scale")
    rot = rotation(yaw, pitch, roll)
    pts = HEAD_POINTS @ rot.T
    fwd = rot @ FORWARD
    n = math.hypot(fwd[0], fwd[1])
    if n < 1e-9:
        raise DegenerateLabel("forward axis points along the camera axis")
    points = scale * pts[:, :2] + np.asarray(center, dtype=np.float64)
    facing = (HEAD_NORMALS @ rot.T)[:, 2]
    return Projection(points, facing, fwd[:2] / n)


def distort(points: np.ndarray, k1: float, image_size) -> np.ndarray:
    """Radial distortion about the image center, radius normalized by the half-diagonal."""
    if k1 == 0:
        return points
    c = np.array(image_size, dtype=np.float64) / 2
    d = points - c
    r2 = (d**2).sum(axis=1, keepdims=True) / (c**2).sum()
    return c + d * (1 + k1 * r2)


def apply_detector_model(proj: Projection, params: SynthParams, rng: np.random.Generator) -> PersonDetections | None:
    """Occlusion and confidence model. ``None`` when fewer than 2 keypoints survive."""
    visible = proj.facing > params.visibility_threshold
    if visible.sum() < 2:
        return None
    pts = distort(proj.points, params.distortion, params.image_size)
    pts = pts + rng.normal(0.0, params.coord_noise, size=pts.shape) if params.coord_noise else pts
    conf = params.conf_base + params.conf_slope * proj.facing + rng.normal(0.0, params.conf_noise, size=N_SLOTS)
    conf = np.clip(conf, params.conf_min, 1.0)
    kp = np.zeros((N_SLOTS, 3))
    kp[visible, :2] = pts[visible]
    kp[visible, 2] = conf[visible]
    return PersonDetections(kp)


def _draw(lo_hi, rng) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def generate_sample(params: SynthParams, index: int, rejections: Counter | None = None) -> Record:
    """Sample ``index`` of a dataset; its own rng stream makes it independent
    of every other index."""
    rng = np.random.default_rng([params.seed, index])
    w, h = params.image_size
    while True:
        yaw = _draw(params.yaw_range, rng)
        pitch = _draw(params.pitch_range, rng)
        roll = _draw(params.roll_range, rng)
        scale = _draw(params.scale_range, rng)
        margin = min(2 * scale, w / 2, h / 2)
        center = (rng.uniform(margin, w - margin), rng.uniform(margin, h - margin))
        try:
            proj = project_head(yaw, pitch, roll, scale, center)
        except DegenerateLabel:
            if rejections is not None:
                rejections["degenerate_label"] += 1
            continue
        det = apply_detector_model(proj, params, rng)
        if det is None:
            if rejections is not None:
                rejections["too_few_visible"] += 1
            continue
        break
    seq = index // params.frames_per_sequence
    return Record(
        frame=f"{index:06d}",
        camera=params.camera,
        person="0",
        detections=PersonDetections(det.keypoints, "0"),
        gaze=GazeLabel(proj.gaze, LabelSource.SYNTHETIC),
        sequence=f"{params.camera}-{seq:06d}",
        meta={"yaw": yaw, "pitch": pitch, "roll": roll, "scale": scale},
    )


def quadrant_histogram(labels: np.ndarray) -> dict[str, int]:
    ang = np.degrees(label_angle(labels))
    bins = {
        "[0,90)": (ang >= 0) & (ang < 90),
        "[90,180]": ang >= 90,
        "[-180,-90)": ang < -90,
        "[-90,0)": (ang >= -90) & (ang < 0),
    }
    return {k: int(v.sum()) for k, v in bins.items()}


def generate_records(params: SynthParams) -> tuple[list[Record], dict]:
    rejections = Counter()
    records = [generate_sample(params, i, rejections) for i in range(params.n_samples)]
    labels = np.array([r.gaze.g for r in records])
    k_hist = Counter(r.detections.num_detected for r in records)
    manifest = {
        "generator": "kpgaze.synthetic",
        "params": params.to_dict(),
        "seed": params.seed,
        "n_samples": params.n_samples,
        "rejections": dict(sorted(rejections.items())),
        "quadrant_histogram": quadrant_histogram(labels),
        "keypoint_histogram": {str(k): k_hist.get(k, 0) for k in range(2, 6)},
    }
    return records, manifest


def generate_dataset(params: SynthParams, path, manifest_path=None) -> dict:
    """Write the dataset (JSON lines) and its manifest; returns the manifest."""
    records, manifest = generate_records(params)
    path = os.fspath(path)
    manifest_path = os.fspath(manifest_path) if manifest_path else path + ".manifest.json"
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
    os.replace(tmp, path)
    with open(manifest_path + ".tmp", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(manifest_path + ".tmp", manifest_path)
    return manifest
