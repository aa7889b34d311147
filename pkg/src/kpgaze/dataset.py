"""Dataset records (JSON lines) and the pose-estimator adapter.

One record per person per frame::

    {"frame": "000123", "camera": "cam1", "person": "0",
     "sequence": "seq07",                      # optional, used for splitting
     "keypoints": [[x, y, c], ...],            # 5 triples, slot order
     "gaze": [gx, gy],                         # optional unit label, or
     "annotations": [{"eye": [x, y], "fixation": [x, y]}, ...],
     "meta": {...}}                            # optional, passed through

Coordinates are pixels (x right, y down); ``c`` is the detector confidence in
[0, 1] and absent keypoints are ``[0, 0, 0]``. A record carries either
``gaze``, ``annotations`` or neither. When a record has annotations, its
annotated eye (mean of the annotation eyes) is matched against every person of
the same ``(camera, frame)`` to decide whose keypoints are evaluated.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import GazeError, ValidationError
from .features import (
    FEATURE_DIM,
    N_SLOTS,
    FeatureVector,
    GazeLabel,
    LabelSource,
    PersonDetections,
    average_annotation,
    build_feature_vector,
    derive_gaze_from_annotation,
)

# head keypoint indices of the common OpenPose body models, in slot order
OPENPOSE_HEAD_INDICES = {
    "BODY_25": (0, 15, 16, 17, 18),
    "COCO": (0, 14, 15, 16, 17),
}


@dataclass(frozen=True)
class Record:
    frame: str
    camera: str
    person: str
    detections: PersonDetections
    gaze: GazeLabel | None = None
    annotations: tuple = ()
    sequence: str | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.camera, self.frame, self.person)

    @property
    def annotated_eye(self) -> np.ndarray | None:
        if not self.annotations:
            return None
        return np.mean([np.asarray(a[0], dtype=float) for a in self.annotations], axis=0)

    def label(self) -> GazeLabel | None:
        """The gaze label; several annotations are averaged."""
        if self.gaze is not None:
            return self.gaze
        if not self.annotations:
            return None
        vectors = [derive_gaze_from_annotation(eye, fix).g for eye, fix in self.annotations]
        if len(vectors) == 1:
            return GazeLabel(vectors[0], LabelSource.EYE_PLUS_FIXATION)
        return average_annotation(vectors)


def _pair(value, name: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ValidationError("expected a pair of numbers", name) from None
    return x, y


def record_from_dict(doc: dict) -> Record:
    if not isinstance(doc, dict):
        raise ValidationError("record must be a JSON object")
    for name in ("frame", "camera", "person", "keypoints"):
        if name not in doc:
            raise ValidationError("missing field", name)
    try:
        kp = np.array(doc["keypoints"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError("keypoints must be numeric triples", "keypoints") from None
    if kp.shape != (N_SLOTS, 3):
        raise ValidationError(f"expected 5 [x, y, c] triples, got shape {kp.shape}", "keypoints")
    detections = PersonDetections(kp, str(doc["person"]))

    gaze = None
    if doc.get("gaze") is not None:
        src = LabelSource(doc.get("gaze_source", LabelSource.DIRECTION.value))
        gaze = GazeLabel(_pair(doc["gaze"], "gaze"), src)
    annotations = []
    for i, ann in enumerate(doc.get("annotations") or ()):
        try:
            annotations.append((_pair(ann["eye"], f"annotations[{i}].eye"),
                                _pair(ann["fixation"], f"annotations[{i}].fixation")))
        except (KeyError, TypeError):
            raise ValidationError("annotation needs eye and fixation", f"annotations[{i}]") from None
    if gaze is not None and annotations:
        raise ValidationError("record has both gaze and annotations", "gaze")
    seq = doc.get("sequence")
    return Record(
        frame=str(doc["frame"]),
        camera=str(doc["camera"]),
        person=str(doc["person"]),
        detections=detections,
        gaze=gaze,
        annotations=tuple(annotations),
        sequence=None if seq is None else str(seq),
        meta=dict(doc.get("meta") or {}),
    )


def record_to_dict(rec: Record) -> dict:
    doc = {
        "frame": rec.frame,
        "camera": rec.camera,
        "person": rec.person,
        "keypoints": rec.detections.keypoints.tolist(),
    }
    if rec.sequence is not None:
        doc["sequence"] = rec.sequence
    if rec.gaze is not None:
        doc["gaze"] = rec.gaze.g.tolist()
        if rec.gaze.source is not LabelSource.DIRECTION:
            doc["gaze_source"] = rec.gaze.source.value
    if rec.annotations:
        doc["annotations"] = [{"eye": list(e), "fixation": list(f)} for e, f in rec.annotations]
    if rec.meta:
        doc["meta"] = rec.meta
    return doc


def dumps_record(rec: Record) -> str:
    return json.dumps(record_to_dict(rec), sort_keys=True)


def iter_records(path) -> Iterator[Record]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                yield record_from_dict(doc)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None


def read_records(path) -> list[Record]:
    return list(iter_records(path))


def write_records(records: Iterable[Record], path) -> int:
    path = os.fspath(path)
    tmp = path + ".tmp"
    n = 0
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


# -- pose estimator adapter -----------------------------------------------

def from_openpose(flat_keypoints, model: str = "BODY_25", person_id: str = "") -> PersonDetections:
    """Pick the five head keypoints out of an OpenPose ``pose_keypoints_2d`` list.

    OpenPose reports undetected joints as ``(0, 0, 0)``; a joint with zero
    confidence but stray coordinates is zeroed so the slot reads as absent.
    """
    try:
        indices = OPENPOSE_HEAD_INDICES[model]
    except KeyError:
        raise ValidationError(f"unknown pose model {model!r}", "model") from None
    arr = np.asarray(flat_keypoints, dtype=np.float64).reshape(-1, 3)
    kp = arr[list(indices)].copy()
    kp[kp[:, 2] <= 0] = 0.0
    return PersonDetections(kp, person_id)


def read_openpose_frame(path, model: str = "BODY_25") -> list[PersonDetections]:
    """Parse one OpenPose per-frame JSON file (``{"people": [...]}``)."""
    with open(path) as fh:
        doc = json.load(fh)
    return [
        from_openpose(p["pose_keypoints_2d"], model, str(p.get("person_id", i)))
        for i, p in enumerate(doc.get("people", []))
    ]


# -- array view used by training/evaluation ---------------------------------

@dataclass(frozen=True)
class LabeledSample:
    features: FeatureVector
    label: GazeLabel
    key: tuple = ()


@dataclass
class SampleSet:
    """Admitted samples as arrays: features (N, 15), labels (N, 2), k (N,)."""

    features: np.ndarray
    labels: np.ndarray
    keys: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, FEATURE_DIM)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 2)
        if len(self.features) != len(self.labels):
            raise ValidationError("features and labels differ in length")
        if not self.keys:
            self.keys = [("", "", str(i)) for i in range(len(self.features))]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def k(self) -> np.ndarray:
        return (self.features[:, 2::3] > 0).sum(axis=1)

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        index = index.astype(np.intp, copy=False)
        return SampleSet(self.features[index], self.labels[index], [self.keys[i] for i in index])

    def samples(self) -> Iterator[LabeledSample]:
        for f, g, key in zip(self.features, self.labels, self.keys):
            yield LabeledSample(FeatureVector(f), GazeLabel(g), key)

    @classmethod
    def from_samples(cls, samples: Iterable[LabeledSample]) -> "SampleSet":
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0, FEATURE_DIM)), np.zeros((0, 2)), [])
        return cls(
            np.stack([s.features.values for s in samples]),
            np.stack([s.label.g for s in samples]),
            [s.key for s in samples],
        )

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            list(self.keys) + list(other.keys),
        )


def admit(records: Iterable[Record], require_label: bool = True) -> tuple[SampleSet, list[tuple]]:
    """Build feature vectors; returns the admitted set and ``(key, reason)`` skips."""
    feats, labels, keys, skipped = [], [], [], []
    for rec in records:
        label = None
        try:
            label = rec.label()
        except GazeError as exc:
            skipped.append((rec.key, type(exc).__name__))
            continue
        if label is None and require_label:
            skipped.append((rec.key, "Unlabeled"))
            continue
        try:
            fv = build_feature_vector(rec.detections)
        except GazeError as exc:
            skipped.append((rec.key, type(exc).__name__))
            continue
        feats.append(fv.values)
        labels.append(label.g if label is not None else (np.nan, np.nan))
        keys.append(rec.key)
    if not feats:
        return SampleSet(np.zeros((0, FEATURE_DIM)), np.zeros((0, 2)), []), skipped
    return SampleSet(np.stack(feats), np.stack(labels), keys), skipped


def load_samples(path, require_label: bool = True) -> tuple[SampleSet, list[tuple]]:
    return admit(iter_records(path), require_label)
