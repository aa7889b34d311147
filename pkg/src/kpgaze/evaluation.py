"""Angular-error metrics, uncertainty analysis and model comparison tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateVector, EmptyDataset

_TINY = 1e-12
UNDEFINED_VARIANCE = 1e-18


def angular_error(g, g_tilde) -> float:
    """Angle between two 2D vectors in degrees, in [0, 180].

    Computed as ``atan2(|a x b|, a . b)``: the same angle as the arccos of the
    cosine similarity, but exact for parallel vectors where arccos loses
    about 1e-6 degrees to rounding.
    """
    a = np.asarray(g, dtype=np.float64)
    b = np.asarray(g_tilde, dtype=np.float64)
    na, nb = np.hypot(*a), np.hypot(*b)
    if na < _TINY or nb < _TINY:
        raise DegenerateVector("angular error of a zero-length vector")
    return float(np.degrees(np.arctan2(abs(a[0] * b[1] - a[1] * b[0]), a @ b)))


def angular_errors(g, g_tilde, strict: bool = True) -> np.ndarray:
    """Row-wise angular errors in degrees for (N, 2) arrays.

    With ``strict=False`` a zero-length row counts as 90 degrees (cosine 0)
    instead of raising.
    """
    a = np.atleast_2d(np.asarray(g, dtype=np.float64))
    b = np.atleast_2d(np.asarray(g_tilde, dtype=np.float64))
    na = np.hypot(a[:, 0], a[:, 1])
    nb = np.hypot(b[:, 0], b[:, 1])
    bad = (na < _TINY) | (nb < _TINY)
    if strict and bad.any():
        raise DegenerateVector(f"{int(bad.sum())} zero-length vector(s)")
    cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    dot = np.einsum("ij,ij->i", a, b)
    return np.where(bad, 90.0, np.degrees(np.arctan2(cross, dot)))


def pearson_correlation(xs, ys) -> float:
    """Pearson rho, or NaN when either variable has (numerically) no variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_correlation needs two equal-length sequences of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx < UNDEFINED_VARIANCE or vy < UNDEFINED_VARIANCE:
        return math.nan
    return float(np.clip(np.mean(dx * dy) / math.sqrt(vx * vy), -1.0, 1.0))


def gaze_angle(g) -> np.ndarray:
    """Polar-plot angle ``atan2(-gy, gx)`` in degrees (y up)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    return np.degrees(np.arctan2(-g[:, 1], g[:, 0]))


def cumulative_curve(sigmas, errors) -> list[tuple[float, float, float]]:
    """``(threshold, mean error of samples with sigma <= threshold, fraction)``
    at every distinct sigma value, ascending."""
    s = np.asarray(sigmas, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    s, e = s[order], e[order]
    csum = np.cumsum(e)
    # last index of each run of equal sigma values
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    n = len(s)
    return [(float(s[i]), float(csum[i] / (i + 1)), (i + 1) / n) for i in last]


def cumulative_on_grid(sigmas, errors, grid) -> list[tuple[float, float, float]]:
    s = np.asarray(sigmas, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    out = []
    for t in grid:
        keep = s <= t
        out.append((float(t), float(e[keep].mean()) if keep.any() else math.nan, float(keep.mean())))
    return out


@dataclass
class EvalReport:
    n_total: int
    n_estimable: int
    mean_error: float
    per_k: dict
    pearson_rho: float | None
    rho_defined: bool
    cumulative: list
    samples: list = field(default_factory=list)
    dataset_digest: str = ""
    model: str = ""
    skipped: dict = field(default_factory=dict)
    unlabeled_keys: list = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.n_estimable / self.n_total if self.n_total else 0.0

    def cumulative_at_quantile(self, q: float) -> tuple[float, float, float]:
        """Curve point at the ``q``-quantile of sigma (lower interpolation)."""
        sig = np.array([s["sigma"] for s in self.samples])
        t = float(np.quantile(sig, q, method="lower"))
        return next(p for p in self.cumulative if p[0] >= t)

    def to_dict(self, with_samples: bool = True) -> dict:
        doc = asdict(self)
        doc["coverage"] = self.coverage
        if not with_samples:
            doc.pop("samples")
        return doc

    def to_json(self, with_samples: bool = True) -> str:
        return json.dumps(self.to_dict(with_samples), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        doc = dict(doc)
        doc.pop("coverage", None)
        doc["per_k"] = {int(k): v for k, v in doc["per_k"].items()}
        doc["cumulative"] = [tuple(p) for p in doc["cumulative"]]
        return cls(**doc)

    def samples_csv(self) -> str:
        lines = ["camera,frame,person,alpha_deg,sigma,error_deg,k"]
        for s in self.samples:
            sigma = "" if s["sigma"] is None else repr(s["sigma"])
            lines.append(",".join([*map(str, s["key"]), repr(s["alpha"]), sigma, repr(s["error"]), str(s["k"])]))
        return "\n".join(lines) + "\n"


def build_report(
    labels,
    predictions,
    sigmas,
    ks,
    keys: Sequence | None = None,
    n_total: int | None = None,
    skipped: dict | None = None,
    unlabeled_keys: Sequence = (),
    dataset_digest: str = "",
    model: str = "",
) -> EvalReport:
    """Assemble an :class:`EvalReport` from per-sample arrays.

    ``sigmas`` may be ``None`` (baselines without uncertainty); the
    correlation and cumulative curve are then left empty.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    ks = np.asarray(ks, dtype=int)
    n = len(labels)
    if n == 0:
        raise EmptyDataset("no estimable samples")
    errors = angular_errors(labels, predictions)
    keys = list(keys) if keys is not None else [("", "", str(i)) for i in range(n)]

    per_k = {}
    for k in range(2, 6):
        sel = ks == k
        per_k[k] = {"count": int(sel.sum()), "mean_error": float(errors[sel].mean()) if sel.any() else None}

    if sigmas is None:
        rho, defined, curve = None, False, []
        sig_list = [None] * n
    else:
        sig = np.asarray(sigmas, dtype=np.float64)
        rho = pearson_correlation(sig, errors) if n >= 2 else math.nan
        defined = not math.isnan(rho)
        rho = rho if defined else None
        curve = cumulative_curve(sig, errors)
        sig_list = [float(v) for v in sig]

    alphas = gaze_angle(predictions)
    samples = [
        {"key": list(key), "alpha": float(a), "sigma": s, "error": float(e), "k": int(k)}
        for key, a, s, e, k in zip(keys, alphas, sig_list, errors, ks)
    ]
    return EvalReport(
        n_total=n if n_total is None else int(n_total),
        n_estimable=n,
        mean_error=float(errors.mean()),
        per_k=per_k,
        pearson_rho=rho,
        rho_defined=defined,
        cumulative=curve,
        samples=samples,
        dataset_digest=dataset_digest,
        model=model,
        skipped=dict(skipped or {}),
        unlabeled_keys=[list(k) for k in unlabeled_keys],
    )


def evaluate(model, dataset, dataset_digest: str = "", model_name: str = "") -> EvalReport:
    """Run a network over a dataset and report.

    ``dataset`` is a list of :class:`~kpgaze.dataset.Record` (subject matching,
    annotation averaging and admission are applied) or an already admitted
    :class:`~kpgaze.dataset.SampleSet`.
    """
    from .dataset import SampleSet
    from .predict import predict_records
    from .network import forward_batch

    if isinstance(dataset, SampleSet):
        if len(dataset) == 0:
            raise EmptyDataset("empty dataset")
        g, sigma, _ = forward_batch(dataset.features, model)
        return build_report(dataset.labels, g, sigma, dataset.k, dataset.keys,
                            dataset_digest=dataset_digest, model=model_name)
    records = list(dataset)
    if not records:
        raise EmptyDataset("empty dataset")
    preds = predict_records(model, records)
    return evaluate_predictions(preds, records, dataset_digest=dataset_digest, model_name=model_name)


def evaluate_predictions(predictions, records, dataset_digest: str = "", model_name: str = "") -> EvalReport:
    """Join prediction records to labeled dataset records and report."""
    from .predict import join_predictions

    joined = join_predictions(predictions, records)
    if not joined.labels:
        raise EmptyDataset("no estimable labeled samples")
    has_sigma = all(s is not None for s in joined.sigmas)
    return build_report(
        joined.labels,
        joined.gazes,
        joined.sigmas if has_sigma else None,
        joined.ks,
        joined.keys,
        n_total=joined.n_total,
        skipped=joined.skip_counts,
        unlabeled_keys=joined.unlabeled_keys,
        dataset_digest=dataset_digest,
        model=model_name,
    )


def compare_models(
    reports: Sequence[EvalReport], labels: Sequence[str] | None = None, aggregate: bool = True
) -> dict:
    """Side-by-side table of coverage and error; adds a mean +/- spread row
    (sample standard deviation) when ``aggregate`` and more than one report
    is given, e.g. the same configuration trained on several seeds."""
    labels = list(labels) if labels is not None else [r.model or f"model{i}" for i, r in enumerate(reports)]
    if len(labels) != len(reports):
        raise ValueError("one label per report")
    rows = []
    for label, r in zip(labels, reports):
        rows.append({
            "label": label,
            "n_total": r.n_total,
            "n_estimable": r.n_estimable,
            "coverage": r.coverage,
            "mean_error": r.mean_error,
            "pearson_rho": r.pearson_rho,
            "dataset_digest": r.dataset_digest,
        })
    table = {"rows": rows, "warnings": []}
    digests = {r.dataset_digest for r in reports}
    if len(digests) > 1:
        table["warnings"].append("reports were computed on different datasets")
    if aggregate and len(reports) > 1:
        errs = np.array([r.mean_error for r in reports])
        covs = np.array([r.coverage for r in reports])
        table["aggregate"] = {
            "n_reports": len(reports),
            "mean_error": float(errs.mean()),
            "spread_error": float(errs.std(ddof=1)),
            "mean_coverage": float(covs.mean()),
            "spread_coverage": float(covs.std(ddof=1)),
        }
    return table


def format_table(table: dict) -> str:
    header = f"{'model':<24} {'n':>7} {'coverage':>9} {'error':>9} {'rho':>7}"
    lines = [header, "-" * len(header)]
    for row in table["rows"]:
        rho = "-" if row["pearson_rho"] is None else f"{row['pearson_rho']:.3f}"
        lines.append(
            f"{row['label']:<24} {row['n_estimable']:>7d} {row['coverage']:>8.1%} "
            f"{row['mean_error']:>8.2f}° {rho:>7}"
        )
    agg = table.get("aggregate")
    if agg:
        lines.append("-" * len(header))
        lines.append(
            f"{'mean ± spread':<24} {'':>7} {agg['mean_coverage']:>8.1%} "
            f"{agg['mean_error']:>6.2f}±{agg['spread_error']:.2f}°"
        )
    for w in table["warnings"]:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"
