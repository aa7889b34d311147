"""Uncertainty-aware training.

Per-sample loss, with ``cos`` the cosine similarity of label and prediction::

    exp(-sigma) / 2 * (-cos) + log(sigma) / 2

averaged over the batch, plus ``l2_hidden / 2 * ||W||^2`` on the two hidden
weight matrices. Note that for any ``|cos| <= 1`` the derivative in ``sigma``
is positive, so taken on its own the loss always prefers a smaller sigma; the
``SIGMA_FLOOR`` of the output transform is what keeps it bounded below.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import SampleSet
from .errors import ArchMismatch, DegeneratePrediction, EmptyDataset, NonFiniteLoss, ValidationError
from .evaluation import angular_errors
from .features import (
    CONF_COLUMNS,
    FeatureVector,
    GazeLabel,
    label_angle,
    mirror_sample,
)
from .network import (
    SIGMA_FLOOR,
    VARIANTS,
    ModelWeights,
    backward,
    forward_batch,
    init_weights,
)

log = logging.getLogger(__name__)

TRAIN_LR = 5e-3
FINETUNE_LR = 1e-5
CONF_STD_MIN = 1e-6
LOSS_FLOOR = -0.5 * math.exp(-SIGMA_FLOOR) + 0.5 * math.log(SIGMA_FLOOR)

AUGMENTATIONS = ("none", "quadrant_balance")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float | None = None  # None: recipe default (train 5e-3, fine-tune 1e-5)
    batch_size: int = 1024
    max_epochs: int = 500
    patience: int = 20
    l2_hidden: float = 1e-4
    seed: int = 0
    augmentation: str = "none"
    input_variant: str = "cgu"
    freeze_conf_stats: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValidationError("must be > 0", "learning_rate")
        if int(self.batch_size) < 1:
            raise ValidationError("must be >= 1", "batch_size")
        if int(self.max_epochs) < 0:
            raise ValidationError("must be >= 0", "max_epochs")
        if int(self.patience) < 1:
            raise ValidationError("must be >= 1", "patience")
        if not self.l2_hidden >= 0:
            raise ValidationError("must be >= 0", "l2_hidden")
        if self.augmentation not in AUGMENTATIONS:
            raise ValidationError(f"must be one of {AUGMENTATIONS}", "augmentation")
        if self.input_variant not in VARIANTS:
            raise ValidationError(f"must be one of {VARIANTS}", "input_variant")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown field(s) {sorted(unknown)}", sorted(unknown)[0])
        try:
            return cls(**doc)
        except ValidationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return "sha256:" + hashlib.sha256(blob).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_error: float


@dataclass
class TrainReport:
    best_epoch: int
    history: list = field(default_factory=list)
    final_val_error: float = math.nan
    stopping_reason: str = ""
    learning_rate: float = math.nan
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss -----------------------------------------------------------------

def loss(g, g_tilde, sigma: float) -> float:
    g = np.asarray(g, dtype=np.float64)
    gt = np.asarray(g_tilde, dtype=np.float64)
    ng, nt = np.hypot(*g), np.hypot(*gt)
    if nt < 1e-12:
        raise DegeneratePrediction("prediction has zero length")
    cos = g @ gt / (ng * nt)
    return float(math.exp(-sigma) / 2 * (-cos) + math.log(sigma) / 2)


def batch_loss(g: np.ndarray, g_tilde: np.ndarray, sigma: np.ndarray):
    """Mean loss over a batch and its gradients w.r.t. ``g_tilde`` and ``sigma``.

    A zero-length prediction contributes cosine 0 and no direction gradient.
    """
    n = len(g)
    ng = np.hypot(g[:, 0], g[:, 1])
    nt = np.hypot(g_tilde[:, 0], g_tilde[:, 1])
    ok = nt >= 1e-12
    nt_safe = np.where(ok, nt, 1.0)
    dot = np.einsum("ij,ij->i", g, g_tilde)
    cos = np.where(ok, dot / (ng * nt_safe), 0.0)
    w = np.exp(-sigma)
    per_sample = w / 2 * (-cos) + np.log(sigma) / 2

    # d cos / d g_tilde = g / (|g| |gt|) - cos * gt / |gt|^2
    dcos = g / (ng * nt_safe)[:, None] - (cos / nt_safe**2)[:, None] * g_tilde
    d_gt = np.where(ok[:, None], (-w / 2)[:, None] * dcos, 0.0) / n
    d_sigma = (w / 2 * cos + 0.5 / sigma) / n
    return float(per_sample.mean()), d_gt, d_sigma


def objective(params: np.ndarray, w: ModelWeights, x: np.ndarray, y: np.ndarray, l2_hidden: float):
    """Full objective (mean loss + hidden-layer L2) and its flat gradient."""
    model = w.with_flat(params)
    g_tilde, sigma, cache = forward_batch(x, model)
    value, d_gt, d_sigma = batch_loss(y, g_tilde, sigma)
    grad = backward(cache, model, d_gt, d_sigma)
    mask = model.l2_mask()
    value += 0.5 * l2_hidden * float(np.sum(mask * params**2))
    grad = grad + l2_hidden * mask * params
    return value, grad


# -- data preparation -------------------------------------------------------

def compute_confidence_stats(train_set: SampleSet) -> tuple[float, float]:
    """Mean and std over every confidence value (zeros included)."""
    if len(train_set) == 0:
        raise EmptyDataset("cannot compute confidence statistics of an empty set")
    c = train_set.features[:, CONF_COLUMNS].ravel()
    return float(c.mean()), max(float(c.std()), CONF_STD_MIN)


# the two lower quadrants, angles measured with y up
QUADRANT_A = (-90.0, 0.0)
QUADRANT_B = (-180.0, -90.0)


def _in_quadrant(angles_deg: np.ndarray, quadrant) -> np.ndarray:
    lo, hi = quadrant
    return (angles_deg > lo) & (angles_deg < hi)


def quadrant_counts(labels: np.ndarray) -> tuple[int, int]:
    ang = np.degrees(label_angle(labels))
    return int(_in_quadrant(ang, QUADRANT_A).sum()), int(_in_quadrant(ang, QUADRANT_B).sum())


def balance_quadrants(train_set: SampleSet, rng: np.random.Generator) -> SampleSet:
    """Mirror random samples of the larger lower quadrant into the smaller one
    until both hold the same number of samples. Originals are kept.

    Boundary angles are excluded from both quadrants since their mirror image
    would not change quadrant.
    """
    ang = np.degrees(label_angle(train_set.labels))
    in_a = np.flatnonzero(_in_quadrant(ang, QUADRANT_A))
    in_b = np.flatnonzero(_in_quadrant(ang, QUADRANT_B))
    big = in_a if len(in_a) > len(in_b) else in_b
    deficit = abs(len(in_a) - len(in_b))
    if deficit == 0:
        return train_set
    chosen = np.sort(rng.choice(big, size=deficit, replace=False))
    feats, labels, keys = [], [], []
    for i in chosen:
        f, g = mirror_sample(FeatureVector(train_set.features[i]), GazeLabel(train_set.labels[i]))
        feats.append(f.values)
        labels.append(g.g)
        keys.append(tuple(train_set.keys[i]) + ("mirrored",))
    return train_set.concat(SampleSet(np.stack(feats), np.stack(labels), keys))


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    learning_rate: float,
    l2_hidden: float = 0.0,
    l2_mask: np.ndarray | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. ``l2_hidden * params`` is added to the
    gradient wherever ``l2_mask`` is 1."""
    g = np.asarray(grads, dtype=np.float64)
    if l2_hidden and l2_mask is not None:
        g = g + l2_hidden * l2_mask * params
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# -- training loop ----------------------------------------------------------

def mean_val_error(w: ModelWeights, val_set: SampleSet) -> float:
    g, _, _ = forward_batch(val_set.features, w)
    return float(angular_errors(val_set.labels, g, strict=False).mean())


def _epoch_loss(w: ModelWeights, data: SampleSet) -> float:
    g, sigma, _ = forward_batch(data.features, w)
    return batch_loss(data.labels, g, sigma)[0]


def train(
    config: TrainConfig,
    train_set: SampleSet,
    val_set: SampleSet,
    init: ModelWeights | None = None,
    learning_rate: float | None = None,
) -> tuple[ModelWeights, TrainReport]:
    """Adam with early stopping on validation angular error.

    Epoch 0 in the history is the starting model; the returned weights are
    those of the best recorded epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    lr = config.learning_rate or learning_rate or TRAIN_LR
    rng = np.random.default_rng(config.seed)

    w = init if init is not None else init_weights(config.seed, config.input_variant)
    if init is None or not config.freeze_conf_stats:
        mean, std = compute_confidence_stats(train_set)
        w = replace(w, conf_mean=mean, conf_std=std)
    w = replace(w, seed=config.seed, config_digest=config.digest())

    data = train_set
    if config.augmentation == "quadrant_balance":
        data = balance_quadrants(train_set, rng)

    params = w.flat()
    mask = w.l2_mask()
    state = AdamState.zeros(params.size)
    n = len(data)

    best_err = mean_val_error(w, val_set)
    history = [EpochRecord(0, _epoch_loss(w, data), best_err)]
    best_epoch, best_params, since_best = 0, params.copy(), 0
    reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = data.features[idx], data.labels[idx]
            model = w.with_flat(params)
            g_tilde, sigma, cache = forward_batch(x, model)
            value, d_gt, d_sigma = batch_loss(y, g_tilde, sigma)
            if not math.isfinite(value):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}",
                    dump={
                        "epoch": epoch,
                        "keys": [list(data.keys[i]) for i in idx],
                        "features": x.tolist(),
                        "labels": y.tolist(),
                        "params": params.tolist(),
                    },
                )
            grad = backward(cache, model, d_gt, d_sigma)
            params, state = adam_step(
                params, grad, state, lr, config.l2_hidden, mask, config.beta1, config.beta2, config.eps
            )
            total += value * len(idx)
        val_err = mean_val_error(w.with_flat(params), val_set)
        history.append(EpochRecord(epoch, total / n, val_err))
        if val_err < best_err:
            best_err, best_epoch, best_params, since_best = val_err, epoch, params.copy(), 0
        else:
            since_best += 1
        log.debug("epoch %d loss %.5f val %.3f", epoch, total / n, val_err)
        if since_best >= config.patience:
            reason = "patience"
            break

    report = TrainReport(
        best_epoch=best_epoch,
        history=history,
        final_val_error=best_err,
        stopping_reason=reason if config.max_epochs > 0 else "zero_epochs",
        learning_rate=lr,
        n_train=len(data),
        n_val=len(val_set),
    )
    return w.with_flat(best_params), report


def fine_tune(
    base_model: ModelWeights,
    config: TrainConfig,
    train_set: SampleSet,
    val_set: SampleSet,
) -> tuple[ModelWeights, TrainReport]:
    """Continue training ``base_model`` on new data (default lr 1e-5).

    Confidence statistics are recomputed on the new training set unless
    ``config.freeze_conf_stats`` is set.
    """
    if base_model.variant != config.input_variant:
        raise ArchMismatch(
            f"base model variant {base_model.variant!r} != configured {config.input_variant!r}"
        )
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    if config.max_epochs == 0:
        err = mean_val_error(base_model, val_set)
        report = TrainReport(0, [EpochRecord(0, _epoch_loss(base_model, train_set), err)], err,
                             "zero_epochs", config.learning_rate or FINETUNE_LR, len(train_set), len(val_set))
        return base_model, report
    return train(config, train_set, val_set, init=base_model, learning_rate=FINETUNE_LR)
