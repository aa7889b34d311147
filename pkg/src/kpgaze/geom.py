"""Non-learned geometric gaze estimate (the Geom baseline).

Construction, all in image coordinates (x right, y down):

1. eye axis: right eye -> left eye, or the image horizontal when only one eye
   is detected;
2. symmetry axis ``s``: the eye axis rotated by +90 degrees;
3. facial normal ``n``: parallel to the eye axis, pointing from the eye
   centroid to the side of the symmetry line the nose lies on. A nose exactly
   on the line (perfectly frontal face) falls back to ``s`` oriented toward
   the nose;
4. pitch ``omega``: inclination of the ear-centroid -> eye-centroid vector
   relative to the line of ``n``, folded into (-90, 90] degrees; 0 without
   ears;
5. gaze: ``n`` rotated by ``omega`` (positive is clockwise on screen).

Measuring ``omega`` against the facial normal rather than the image
horizontal keeps the estimate equivariant to in-plane rotation whenever both
eyes are present; the single-eye fallback is tied to the image frame by
construction. For lateral views ``n`` lies on the eye axis, so this is the
inclination of the ear-eye line against the eye axis; for the frontal
fallback it is measured against the symmetry axis, where a symmetric face
gives 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, MissingEyes, MissingNose
from .features import PersonDetections

_EPS = 1e-9


@dataclass(frozen=True)
class GeomEstimate:
    gaze: np.ndarray
    symmetry_axis: np.ndarray
    facial_normal: np.ndarray
    pitch: float


def _perp(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


def rotate(v, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    v = np.asarray(v, dtype=np.float64)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def estimate_gaze_geom(detections) -> GeomEstimate:
    kp = detections.keypoints if isinstance(detections, PersonDetections) else np.asarray(detections, float)
    present = kp[:, 2] > 0
    if not present[0]:
        raise MissingNose("Geom needs a detected nose")
    if not (present[1] or present[2]):
        raise MissingEyes("Geom needs at least one detected eye")
    nose = kp[0, :2]

    if present[1] and present[2]:
        axis = kp[2, :2] - kp[1, :2]
        length = np.hypot(*axis)
        if length == 0:
            raise DegenerateGeometry("both eyes at the same position")
        axis = axis / length
        eye_c = 0.5 * (kp[1, :2] + kp[2, :2])
    else:
        axis = np.array([1.0, 0.0])
        eye_c = kp[1, :2] if present[1] else kp[2, :2]
    s = _perp(axis)

    d = nose - eye_c
    scale = max(np.hypot(*d), 1.0)
    t = d @ axis
    if abs(t) > _EPS * scale:
        n = np.sign(t) * axis
    else:
        n = s if d @ s >= 0 else -s

    omega = 0.0
    ears = present[3:]
    if ears.any():
        v = eye_c - kp[3:][ears, :2].mean(axis=0)
        if np.hypot(*v) > _EPS * scale:
            omega = float(np.arctan2(v @ _perp(n), v @ n))
            # line inclination, not direction: fold into (-pi/2, pi/2]
            if omega > np.pi / 2:
                omega -= np.pi
            elif omega <= -np.pi / 2:
                omega += np.pi

    gaze = rotate(n, omega)
    gaze = gaze / np.hypot(*gaze)
    return GeomEstimate(gaze, s, n, omega)
