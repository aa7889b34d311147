"""Confidence-gated regressor: (10 CGU, 10 FC, 10 FC, 3 FC).

Each of the 10 input coordinates goes through a Confidence Gated Unit::

    cgu(q, c) = relu(w_q * q + b_q) * sigmoid(w_c * c)

where ``c`` is the keypoint confidence standardized with statistics frozen in
the model. Two relu hidden layers follow, then three linear outputs: the gaze
vector ``(gx, gy)`` and a raw uncertainty mapped through
``softplus(.) + SIGMA_FLOOR``.

Forward and backward passes are batched numpy and written by hand; the flat
parameter order is ``input weight, input bias, gate weight, fc1 weight, fc1
bias, fc2 weight, fc2 bias, out weight, out bias`` (row-major matrices).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ArchMismatch, CorruptModel, DegeneratePrediction
from .features import CONF_COLUMNS, COORD_COLUMNS, FeatureVector

SIGMA_FLOOR = 1e-3
HIDDEN = 10
N_OUT = 3
SCHEMA = "kpgaze.model"
SCHEMA_VERSION = 1

VARIANTS = ("cgu", "net0", "relu_conf")

# column of the confidence gating each coordinate column (x and y of a slot share it)
_GATE_CONF = np.repeat(CONF_COLUMNS, 2)


@dataclass(frozen=True)
class Architecture:
    """Layer sizes. ``n_coords`` is 10 for the real model; other values exist
    only so the parameter counter can be exercised on toy descriptors."""

    variant: str = "cgu"
    n_coords: int = 10
    hidden: tuple[int, int] = (HIDDEN, HIDDEN)
    n_out: int = N_OUT

    @property
    def n_inputs(self) -> int:
        # relu_conf feeds the 5 (or n_coords/2) confidences as extra relu inputs
        return self.n_coords + self.n_coords // 2 if self.variant == "relu_conf" else self.n_coords

    @property
    def gated(self) -> bool:
        return self.variant == "cgu"

    @property
    def tag(self) -> str:
        h1, h2 = self.hidden
        return f"kpgaze-{self.variant}-{self.n_inputs}-{h1}-{h2}-{self.n_out}"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h1, h2 = self.hidden
        n = self.n_inputs
        return {
            "in_w": (n,),
            "in_b": (n,),
            "gate_w": (n,) if self.gated else (0,),
            "fc1_w": (h1, n),
            "fc1_b": (h1,),
            "fc2_w": (h2, h1),
            "fc2_b": (h2,),
            "out_w": (self.n_out, h2),
            "out_b": (self.n_out,),
        }

    def layer_sizes(self) -> dict[str, int]:
        s = {k: int(np.prod(v)) for k, v in self.shapes().items()}
        return {
            "input": s["in_w"] + s["in_b"] + s["gate_w"],
            "fc1": s["fc1_w"] + s["fc1_b"],
            "fc2": s["fc2_w"] + s["fc2_b"],
            "out": s["out_w"] + s["out_b"],
        }


STANDARD = Architecture()
SUPPORTED_TAGS = {Architecture(v).tag: v for v in VARIANTS}
PARAM_NAMES = tuple(STANDARD.shapes())


class CguParams(NamedTuple):
    w_q: float
    b_q: float
    w_c: float


@dataclass(frozen=True)
class ModelWeights:
    variant: str
    in_w: np.ndarray
    in_b: np.ndarray
    gate_w: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    conf_mean: float = 0.0
    conf_std: float = 1.0
    seed: int | None = None
    config_digest: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArchMismatch(f"unknown variant {self.variant!r}")
        for name, shape in self.arch.shapes().items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise CorruptModel(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.conf_std > 0:
            raise CorruptModel("conf_std must be positive")

    @property
    def arch(self) -> Architecture:
        return Architecture(self.variant)

    @property
    def arch_tag(self) -> str:
        return self.arch.tag

    def cgu(self, i: int) -> CguParams:
        return CguParams(float(self.in_w[i]), float(self.in_b[i]), float(self.gate_w[i]))

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_flat(self, vec: np.ndarray, **changes) -> "ModelWeights":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != param_count(self):
            raise CorruptModel(f"expected {param_count(self)} parameters, got {vec.size}")
        arrays, pos = {}, 0
        for name, shape in self.arch.shapes().items():
            n = int(np.prod(shape))
            arrays[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        return replace(self, **arrays, **changes)

    def l2_mask(self) -> np.ndarray:
        """1.0 on hidden-layer weight matrices (fc1, fc2), 0.0 elsewhere."""
        return np.concatenate([
            np.full(getattr(self, n).size, 1.0 if n in ("fc1_w", "fc2_w") else 0.0)
            for n in PARAM_NAMES
        ])

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (
            self.variant == other.variant
            and np.array_equal(self.flat(), other.flat())
            and self.conf_mean == other.conf_mean
            and self.conf_std == other.conf_std
        )

    __hash__ = None


def param_count(w) -> int:
    """Learnable parameters of a model or architecture (confidence stats excluded)."""
    arch = w.arch if isinstance(w, ModelWeights) else w
    return sum(arch.layer_sizes().values())


def init_weights(seed: int, variant: str = "cgu") -> ModelWeights:
    """Input-layer parameters start at exactly 1.0; FC weights are He-normal."""
    arch = Architecture(variant)
    rng = np.random.default_rng(seed)
    shapes = arch.shapes()
    arrays = {}
    for name in ("in_w", "in_b", "gate_w"):
        arrays[name] = np.ones(shapes[name])
    for layer in ("fc1", "fc2", "out"):
        fan_out, fan_in = shapes[f"{layer}_w"]
        arrays[f"{layer}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        arrays[f"{layer}_b"] = np.zeros(fan_out)
    return ModelWeights(variant, **arrays, conf_mean=0.0, conf_std=1.0, seed=seed)


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def cgu_forward(q: float, c_std: float, p: CguParams) -> float:
    return float(relu(p.w_q * q + p.b_q) * expit(p.w_c * c_std))


@dataclass(frozen=True)
class GazePrediction:
    g: np.ndarray
    sigma: float

    @property
    def g_unit(self) -> np.ndarray:
        n = np.hypot(*self.g)
        if n < 1e-12:
            raise DegeneratePrediction("predicted gaze vector has zero length")
        return self.g / n


@dataclass
class Cache:
    x: np.ndarray
    inputs: np.ndarray
    c_std: np.ndarray | None
    a: np.ndarray
    s: np.ndarray | None
    u: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    o: np.ndarray


def standardize_confidences(x: np.ndarray, w: ModelWeights) -> np.ndarray:
    return (x[:, CONF_COLUMNS] - w.conf_mean) / w.conf_std


def forward_batch(x: np.ndarray, w: ModelWeights) -> tuple[np.ndarray, np.ndarray, Cache]:
    """Run ``x`` of shape (N, 15). Returns ``(g (N, 2), sigma (N,), cache)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = x[:, COORD_COLUMNS]
    c_std = (x[:, _GATE_CONF] - w.conf_mean) / w.conf_std
    if w.variant == "relu_conf":
        inputs = np.concatenate([q, standardize_confidences(x, w)], axis=1)
    else:
        inputs = q
    a = inputs * w.in_w + w.in_b
    if w.variant == "cgu":
        s = expit(c_std * w.gate_w)
        u = relu(a) * s
    else:
        s = None
        u = relu(a)
    z1 = u @ w.fc1_w.T + w.fc1_b
    h1 = relu(z1)
    z2 = h1 @ w.fc2_w.T + w.fc2_b
    h2 = relu(z2)
    o = h2 @ w.out_w.T + w.out_b
    sigma = softplus(o[:, 2]) + SIGMA_FLOOR
    cache = Cache(x, inputs, c_std if s is not None else None, a, s, u, z1, h1, z2, h2, o)
    return o[:, :2].copy(), sigma, cache


def forward(features: FeatureVector | np.ndarray, w: ModelWeights) -> GazePrediction:
    values = features.values if isinstance(features, FeatureVector) else features
    g, sigma, _ = forward_batch(values, w)
    return GazePrediction(g[0], float(sigma[0]))


def backward(cache: Cache, w: ModelWeights, d_g: np.ndarray, d_sigma: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_i d_g[i].g[i] + d_sigma[i]*sigma[i]`` w.r.t. every
    parameter, flattened in :data:`PARAM_NAMES` order."""
    d_o = np.empty_like(cache.o)
    d_o[:, :2] = d_g
    d_o[:, 2] = np.asarray(d_sigma) * expit(cache.o[:, 2])

    grads = {
        "out_w": d_o.T @ cache.h2,
        "out_b": d_o.sum(axis=0),
    }
    d_z2 = (d_o @ w.out_w) * (cache.z2 > 0)
    grads["fc2_w"] = d_z2.T @ cache.h1
    grads["fc2_b"] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ w.fc2_w) * (cache.z1 > 0)
    grads["fc1_w"] = d_z1.T @ cache.u
    grads["fc1_b"] = d_z1.sum(axis=0)
    d_u = d_z1 @ w.fc1_w

    if cache.s is not None:
        d_a = d_u * cache.s * (cache.a > 0)
        d_gate = d_u * relu(cache.a) * cache.s * (1.0 - cache.s)
        grads["gate_w"] = (d_gate * cache.c_std).sum(axis=0)
    else:
        d_a = d_u * (cache.a > 0)
        grads["gate_w"] = np.zeros(0)
    grads["in_w"] = (d_a * cache.inputs).sum(axis=0)
    grads["in_b"] = d_a.sum(axis=0)
    return np.concatenate([np.ravel(grads[n]) for n in PARAM_NAMES])


# -- serialization ---------------------------------------------------------

def _layers(w: ModelWeights) -> dict:
    return {
        "input": {"weight": w.in_w.tolist(), "bias": w.in_b.tolist(), "gate": w.gate_w.tolist()},
        "fc1": {"weight": w.fc1_w.tolist(), "bias": w.fc1_b.tolist()},
        "fc2": {"weight": w.fc2_w.tolist(), "bias": w.fc2_b.tolist()},
        "out": {"weight": w.out_w.tolist(), "bias": w.out_b.tolist()},
    }


def model_to_dict(w: ModelWeights) -> dict:
    return {
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "arch_tag": w.arch_tag,
        "variant": w.variant,
        "param_count": param_count(w),
        "layers": _layers(w),
        "conf_mean": float(w.conf_mean),
        "conf_std": float(w.conf_std),
        "metadata": {"seed": w.seed, "config_digest": w.config_digest, **w.metadata},
    }


def model_from_dict(doc: dict) -> ModelWeights:
    try:
        if doc.get("schema") != SCHEMA or doc.get("schema_version") != SCHEMA_VERSION:
            raise CorruptModel(f"unsupported schema {doc.get('schema')!r} v{doc.get('schema_version')!r}")
        tag = doc["arch_tag"]
        if tag not in SUPPORTED_TAGS:
            raise ArchMismatch(f"model architecture {tag!r} is not one of {sorted(SUPPORTED_TAGS)}")
        variant = SUPPORTED_TAGS[tag]
        layers = doc["layers"]
        arrays = {
            "in_w": layers["input"]["weight"],
            "in_b": layers["input"]["bias"],
            "gate_w": layers["input"]["gate"],
        }
        for name in ("fc1", "fc2", "out"):
            arrays[f"{name}_w"] = layers[name]["weight"]
            arrays[f"{name}_b"] = layers[name]["bias"]
        shapes = Architecture(variant).shapes()
        for name, value in arrays.items():
            arr = np.array(value, dtype=np.float64)
            if arr.shape != shapes[name]:
                raise CorruptModel(f"{name}: expected shape {shapes[name]}, got {arr.shape}")
            arrays[name] = arr
        meta = dict(doc.get("metadata") or {})
        w = ModelWeights(
            variant,
            **arrays,
            conf_mean=float(doc["conf_mean"]),
            conf_std=float(doc["conf_std"]),
            seed=meta.pop("seed", None),
            config_digest=meta.pop("config_digest", ""),
            metadata=meta,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"malformed model document: {exc}") from exc
    if doc.get("param_count") != param_count(w):
        raise CorruptModel(f"param_count {doc.get('param_count')} != {param_count(w)}")
    return w


def dumps_model(w: ModelWeights) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(model_to_dict(w), indent=1, sort_keys=True) + "\n"


def save_model(w: ModelWeights, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(dumps_model(w))
    os.replace(tmp, path)


def load_model(path) -> ModelWeights:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"{path}: not a JSON document ({exc})") from exc
    if not isinstance(doc, dict):
        raise CorruptModel(f"{path}: expected a JSON object")
    return model_from_dict(doc)
