"""Prediction records and joining them back to labeled datasets.

A prediction record is one JSON object per input person::

    {"camera": ..., "frame": ..., "person": ..., "k": 4,
     "gaze": [gx, gy] | null, "sigma": 0.12 | null, "skip": null | "TooFewKeypoints"}

``gaze`` is unit length. ``sigma`` is null for the geometric baseline.
"""

from __future__ import annotations

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GazeError, ValidationError
from .features import build_feature_vector, match_subject
from .geom import estimate_gaze_geom
from .network import ModelWeights, forward_batch


def _base(rec) -> dict:
    return {
        "camera": rec.camera,
        "frame": rec.frame,
        "person": rec.person,
        "k": rec.detections.num_detected,
        "gaze": None,
        "sigma": None,
        "skip": None,
    }


def predict_records(model: ModelWeights | None, records: Sequence, baseline: str | None = None) -> list[dict]:
    """One prediction record per input record, in input order."""
    out = [_base(r) for r in records]
    if baseline == "geom":
        for rec, pred in zip(records, out):
            try:
                est = estimate_gaze_geom(rec.detections)
            except GazeError as exc:
                pred["skip"] = type(exc).__name__
                continue
            pred["gaze"] = est.gaze.tolist()
        return out
    if baseline is not None:
        raise ValidationError(f"unknown baseline {baseline!r}", "baseline")
    if model is None:
        raise ValidationError("a model is required unless a baseline is selected", "model")

    rows, feats = [], []
    for i, rec in enumerate(records):
        try:
            feats.append(build_feature_vector(rec.detections).values)
            rows.append(i)
        except GazeError as exc:
            out[i]["skip"] = type(exc).__name__
    if feats:
        g, sigma, _ = forward_batch(np.stack(feats), model)
        norms = np.hypot(g[:, 0], g[:, 1])
        for j, i in enumerate(rows):
            if norms[j] < 1e-12:
                out[i]["skip"] = "DegeneratePrediction"
                continue
            out[i]["gaze"] = (g[j] / norms[j]).tolist()
            out[i]["sigma"] = float(sigma[j])
    return out


def write_predictions(preds: Iterable[dict], path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_predictions(path) -> list[dict]:
    preds = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            for name in ("camera", "frame", "person"):
                if name not in doc:
                    raise ValidationError(f"line {lineno}: missing field", name)
            preds.append(doc)
    return preds


def predictions_to_arrays(preds: Sequence[dict]):
    ok = [p for p in preds if p.get("gaze") is not None]
    g = np.array([p["gaze"] for p in ok], dtype=np.float64).reshape(-1, 2)
    sigma = [p.get("sigma") for p in ok]
    return ok, g, sigma


@dataclass
class Joined:
    labels: list = field(default_factory=list)
    gazes: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    n_total: int = 0
    skip_counts: dict = field(default_factory=dict)
    unlabeled_keys: list = field(default_factory=list)


def join_predictions(preds: Sequence[dict], records: Sequence) -> Joined:
    """Pair each labeled record with the prediction it should be scored on.

    Records with annotations are resolved through subject matching against all
    persons of the same ``(camera, frame)``; other labeled records use their own
    key. Every labeled record counts toward ``n_total``; failures are tallied
    by reason in ``skip_counts``. Predictions whose key has no labeled record
    are listed in ``unlabeled_keys``.
    """
    by_key = {}
    for p in preds:
        by_key[(str(p["camera"]), str(p["frame"]), str(p["person"]))] = p
    frames = defaultdict(list)
    for rec in records:
        frames[(rec.camera, rec.frame)].append(rec)

    joined = Joined()
    skips = Counter()
    used = set()
    for rec in records:
        try:
            label = rec.label()
        except GazeError as exc:
            joined.n_total += 1
            skips[type(exc).__name__] += 1
            continue
        if label is None:
            continue
        joined.n_total += 1
        target = rec
        if rec.annotated_eye is not None:
            people = frames[(rec.camera, rec.frame)]
            idx = match_subject([r.detections for r in people], rec.annotated_eye)
            if idx is None:
                skips["NoSubjectMatch"] += 1
                continue
            target = people[idx]
        used.add(target.key)
        pred = by_key.get(target.key)
        if pred is None:
            skips["MissingPrediction"] += 1
            continue
        if pred.get("gaze") is None:
            skips[pred.get("skip") or "NoPrediction"] += 1
            continue
        joined.labels.append(label.g)
        joined.gazes.append(pred["gaze"])
        joined.sigmas.append(pred.get("sigma"))
        joined.ks.append(int(pred.get("k", target.detections.num_detected)))
        joined.keys.append(target.key)
    labeled_keys = used | {r.key for r in records if r.gaze is not None or r.annotations}
    joined.unlabeled_keys = sorted(k for k in by_key if k not in labeled_keys)
    joined.skip_counts = dict(sorted(skips.items()))
    return joined
