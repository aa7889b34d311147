"""Facial keypoints -> normalized 15-d feature vectors.

Slot order is fixed everywhere in the package::

    0 nose, 1 right eye, 2 left eye, 3 right ear, 4 left ear

A feature vector concatenates ``(x_hat, y_hat, c)`` for each slot. Coordinates
are centered on the head centroid of the *detected* keypoints and divided by
the distance of the farthest detected keypoint, so the representation is
invariant to image translation and scale. Absent keypoints (c == 0) encode as
``(0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateGeometry,
    DegenerateMean,
    TooFewKeypoints,
    ValidationError,
    ZeroLengthGaze,
)

N_SLOTS = 5
FEATURE_DIM = 3 * N_SLOTS
MIN_KEYPOINTS = 2
MATCH_RADIUS = 1.5

# slot permutation induced by a left/right mirror
MIRROR_PERMUTATION = (0, 2, 1, 4, 3)

COORD_COLUMNS = np.array([0, 1, 3, 4, 6, 7, 9, 10, 12, 13])
CONF_COLUMNS = np.array([2, 5, 8, 11, 14])


class Kind(str, Enum):
    NOSE = "nose"
    EYE = "eye"
    EAR = "ear"


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    NONE = "none"


SLOTS: tuple[tuple[Kind, Side], ...] = (
    (Kind.NOSE, Side.NONE),
    (Kind.EYE, Side.RIGHT),
    (Kind.EYE, Side.LEFT),
    (Kind.EAR, Side.RIGHT),
    (Kind.EAR, Side.LEFT),
)
SLOT_NAMES = ("nose", "right_eye", "left_eye", "right_ear", "left_ear")


@dataclass(frozen=True)
class KeypointDetection:
    kind: Kind
    side: Side
    x: float
    y: float
    c: float

    def __post_init__(self):
        if (self.kind is Kind.NOSE) != (self.side is Side.NONE):
            raise ValidationError(f"{self.kind.value} cannot have side {self.side.value}", "side")
        _check_triple(self.x, self.y, self.c, f"{self.side.value}_{self.kind.value}")

    @property
    def detected(self) -> bool:
        return self.c > 0


def _check_triple(x: float, y: float, c: float, name: str) -> None:
    if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(c)):
        raise ValidationError("non-finite keypoint value", name)
    if not 0.0 <= c <= 1.0:
        raise ValidationError(f"confidence {c} outside [0, 1]", name)
    if c == 0.0 and (x != 0.0 or y != 0.0):
        raise ValidationError("absent keypoint must have zero coordinates", name)


@dataclass(frozen=True)
class PersonDetections:
    """Five head keypoints of one person, ``keypoints`` has shape (5, 3)."""

    keypoints: np.ndarray
    person_id: str = ""

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.shape != (N_SLOTS, 3):
            raise ValidationError(f"expected shape (5, 3), got {kp.shape}", "keypoints")
        for name, (x, y, c) in zip(SLOT_NAMES, kp):
            _check_triple(x, y, c, name)
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)

    @classmethod
    def from_detections(cls, dets: Sequence[KeypointDetection], person_id: str = "") -> "PersonDetections":
        kp = np.zeros((N_SLOTS, 3))
        seen = set()
        for d in dets:
            slot = SLOTS.index((d.kind, d.side))
            if slot in seen:
                raise ValidationError("duplicate keypoint", SLOT_NAMES[slot])
            seen.add(slot)
            kp[slot] = (d.x, d.y, d.c)
        return cls(kp, person_id)

    def detection(self, slot: int) -> KeypointDetection:
        kind, side = SLOTS[slot]
        x, y, c = self.keypoints[slot]
        return KeypointDetection(kind, side, float(x), float(y), float(c))

    @property
    def present(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    @property
    def num_detected(self) -> int:
        return int(self.present.sum())

    def __eq__(self, other):
        if not isinstance(other, PersonDetections):
            return NotImplemented
        return self.person_id == other.person_id and np.array_equal(self.keypoints, other.keypoints)

    __hash__ = None


@dataclass(frozen=True)
class HeadGeometry:
    centroid: np.ndarray
    delta: float


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(FEATURE_DIM)
        m = v[CONF_COLUMNS] > 0 if self.mask is None else np.array(self.mask, dtype=bool)
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def coords(self) -> np.ndarray:
        return self.values.reshape(N_SLOTS, 3)[:, :2]

    @property
    def confidences(self) -> np.ndarray:
        return self.values[CONF_COLUMNS]

    @property
    def k(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.mask, other.mask)

    __hash__ = None


class LabelSource(str, Enum):
    DIRECTION = "direction"
    EYE_PLUS_FIXATION = "eye_plus_fixation"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class GazeLabel:
    g: np.ndarray
    source: LabelSource = LabelSource.DIRECTION

    def __post_init__(self):
        g = np.array(self.g, dtype=np.float64).reshape(2)
        if abs(np.hypot(*g) - 1.0) > 1e-9:
            raise ValidationError(f"gaze label {g.tolist()} is not unit length", "gaze")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def from_vector(cls, v, source: LabelSource = LabelSource.DIRECTION) -> "GazeLabel":
        v = np.asarray(v, dtype=np.float64)
        n = np.hypot(*v)
        if n < 1e-12:
            raise ZeroLengthGaze("gaze vector has zero length")
        return cls(v / n, source)

    def __eq__(self, other):
        if not isinstance(other, GazeLabel):
            return NotImplemented
        return np.array_equal(self.g, other.g) and self.source == other.source

    __hash__ = None


def _as_keypoints(detections) -> np.ndarray:
    if isinstance(detections, PersonDetections):
        return detections.keypoints
    return np.asarray(detections, dtype=np.float64).reshape(N_SLOTS, 3)


def head_geometry(detections) -> HeadGeometry:
    """Centroid and farthest-keypoint distance over detected keypoints only."""
    kp = _as_keypoints(detections)
    present = kp[:, 2] > 0
    if not present.any():
        raise TooFewKeypoints("no keypoints detected")
    pts = kp[present, :2]
    centroid = pts.mean(axis=0)
    delta = float(np.max(np.hypot(*(pts - centroid).T)))
    return HeadGeometry(centroid, delta)


def build_feature_vector(detections) -> FeatureVector:
    kp = _as_keypoints(detections)
    present = kp[:, 2] > 0
    k = int(present.sum())
    if k < MIN_KEYPOINTS:
        raise TooFewKeypoints(f"{k} keypoint(s) detected, need at least {MIN_KEYPOINTS}")
    geom = head_geometry(kp)
    if not geom.delta > 0:
        raise DegenerateGeometry("all detected keypoints coincide")
    out = np.zeros((N_SLOTS, 3))
    out[present, :2] = (kp[present, :2] - geom.centroid) / geom.delta
    out[present, 2] = kp[present, 2]
    return FeatureVector(out.reshape(-1), present)


def mirror_features(features: FeatureVector) -> FeatureVector:
    v = features.values.reshape(N_SLOTS, 3)[list(MIRROR_PERMUTATION)].copy()
    v[:, 0] = -v[:, 0]
    # keep absent slots at exactly (0, 0, 0) rather than -0.0
    v[v == 0] = 0.0
    return FeatureVector(v.reshape(-1), features.mask[list(MIRROR_PERMUTATION)])


def mirror_label(label: GazeLabel) -> GazeLabel:
    g = label.g.copy()
    g[0] = -g[0] + 0.0
    return GazeLabel(g, label.source)


def mirror_sample(features: FeatureVector, label: GazeLabel) -> tuple[FeatureVector, GazeLabel]:
    """Reflect a sample about the image vertical axis.

    Anatomical sides swap (the right eye of the mirrored face is the left eye
    of the original), so eye and ear slots are exchanged as well as x negated.
    """
    return mirror_features(features), mirror_label(label)


def mirror_detections(detections: PersonDetections, width: float = 0.0) -> PersonDetections:
    """Pixel-space mirror: ``x -> width - x`` for detected keypoints, sides swapped."""
    kp = detections.keypoints[list(MIRROR_PERMUTATION)].copy()
    present = kp[:, 2] > 0
    kp[present, 0] = width - kp[present, 0]
    return PersonDetections(kp, detections.person_id)


def derive_gaze_from_annotation(eye, fixation) -> GazeLabel:
    d = np.asarray(fixation, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    n = np.hypot(*d)
    if n == 0:
        raise ZeroLengthGaze("eye and fixation points coincide")
    return GazeLabel(d / n, LabelSource.EYE_PLUS_FIXATION)


def average_annotation(vectors) -> GazeLabel:
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 2)
    if len(v) == 0:
        raise DegenerateMean("no annotation vectors")
    mean = v.mean(axis=0)
    n = np.hypot(*mean)
    if n < 1e-9:
        raise DegenerateMean("annotation vectors cancel out")
    return GazeLabel(mean / n, LabelSource.EYE_PLUS_FIXATION)


def match_subject(people: Sequence, annotated_eye) -> int | None:
    """Index of the person whose head centroid is nearest ``annotated_eye``.

    Only people with at least two detected keypoints are candidates. The
    nearest candidate is accepted only if the eye lies within
    ``1.5 * delta`` of its centroid; otherwise nobody matches. Ties go to the
    lower index.
    """
    eye = np.asarray(annotated_eye, dtype=np.float64)
    best, best_dist, best_delta = None, np.inf, 0.0
    for i, person in enumerate(people):
        kp = _as_keypoints(person)
        if int((kp[:, 2] > 0).sum()) < MIN_KEYPOINTS:
            continue
        geom = head_geometry(kp)
        dist = float(np.hypot(*(eye - geom.centroid)))
        if dist < best_dist:
            best, best_dist, best_delta = i, dist, geom.delta
    if best is None or best_dist > MATCH_RADIUS * best_delta:
        return None
    return best


def label_angle(g) -> np.ndarray:
    """Angle of gaze vectors from the +x axis, y pointing up, in radians."""
    g = np.asarray(g, dtype=np.float64)
    return np.arctan2(-g[..., 1], g[..., 0])
