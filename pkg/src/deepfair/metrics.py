"""Accuracy, TPR gap and MCDP gap for binary sensitive attributes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class MetricUndefinedError(ValueError):
    """No class or group supports the requested metric."""


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        sens = np.asarray(self.sensitive, dtype=np.float64)
        self.sensitive = sens[:, None] if sens.ndim == 1 else sens
        n, k = self.probs.shape
        if self.labels.shape != (n,) or self.sensitive.shape[0] != n:
            raise ValueError("probs, labels and sensitive must share the sample count")
        if n and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("probability rows must sum to 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in 0..{k - 1}")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def predictions(self) -> np.ndarray:
        # argmax returns the first maximal index, i.e. ties go to the lowest class
        return self.probs.argmax(axis=1)

    def group(self, column: int = 0) -> np.ndarray:
        z = self.sensitive[:, column]
        if not np.all((z == 0) | (z == 1)):
            raise ValueError(f"sensitive column {column} is not binary 0/1")
        return z.astype(np.int64)


def accuracy(preds: PredictionSet) -> float:
    if preds.labels.size == 0:
        raise MetricUndefinedError("accuracy of an empty prediction set")
    return 100.0 * float(np.mean(preds.predictions() == preds.labels))


@dataclass
class TPRGap:
    per_class: dict[int, float]
    aggregate: float
    excluded: list[int] = field(default_factory=list)


def tpr_gap(preds: PredictionSet, column: int = 0) -> TPRGap:
    """Signed per-class TPR(z=1) - TPR(z=0) and their root-mean-square, in %."""
    z = preds.group(column)
    yhat = preds.predictions()
    gaps: dict[int, float] = {}
    excluded = []
    for j in range(preds.num_classes):
        pos = preds.labels == j
        m1, m0 = pos & (z == 1), pos & (z == 0)
        if not m1.any() or not m0.any():
            excluded.append(j)
            continue
        gaps[j] = float(np.mean(yhat[m1] == j) - np.mean(yhat[m0] == j))
    if excluded:
        logger.warning("TPR gap: classes %s lack positives in one group; excluded", excluded)
    if not gaps:
        raise MetricUndefinedError("TPR gap undefined: no class has positives in both groups")
    agg = 100.0 * float(np.sqrt(np.mean(np.square(list(gaps.values())))))
    return TPRGap(gaps, agg, excluded)


def ks_distance(a, b) -> float:
    """Exact two-sample Kolmogorov-Smirnov distance by a sorted merge."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise MetricUndefinedError("KS distance needs two nonempty samples")
    i = j = 0
    best = 0.0
    while i < na and j < nb:
        y = a[i] if a[i] <= b[j] else b[j]
        while i < na and a[i] == y:
            i += 1
        while j < nb and b[j] == y:
            j += 1
        best = max(best, abs(i / na - j / nb))
    return best


@dataclass
class MCDPGap:
    per_class: dict[int, float]
    aggregate: float


def mcdp_gap(preds: PredictionSet, column: int = 0) -> MCDPGap:
    """Per-class KS distance of predicted scores across groups; RMS over K-1 classes."""
    z = preds.group(column)
    if not (z == 1).any() or not (z == 0).any():
        raise MetricUndefinedError(f"MCDP undefined: sensitive column {column} has an empty group")
    per = {j: ks_distance(preds.probs[z == 1, j], preds.probs[z == 0, j])
           for j in range(preds.num_classes)}
    head = [per[j] for j in range(preds.num_classes - 1)]
    return MCDPGap(per, 100.0 * float(np.sqrt(np.mean(np.square(head)))))


@dataclass
class AttributeReport:
    attribute: int
    tpr_gap: float
    mcdp_gap: float
    tpr_per_class: dict[int, float]
    mcdp_per_class: dict[int, float]
    tpr_excluded: list[int]

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "tpr_gap": self.tpr_gap,
            "mcdp_gap": self.mcdp_gap,
            "per_class": {
                "tpr_gap": {str(k): v for k, v in self.tpr_per_class.items()},
                "mcdp": {str(k): v for k, v in self.mcdp_per_class.items()},
                "tpr_excluded": self.tpr_excluded,
            },
        }


@dataclass
class FairnessReport:
    """Headline gaps are means over the audited attributes (identical when d = 1)."""

    accuracy: float
    tpr_gap: float | None
    mcdp_gap: float | None
    per_attribute: list[AttributeReport]
    dc_z_latent: float | None = None
    dc_z_latent_given_y: float | None = None
    config_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "tpr_gap": self.tpr_gap,
            "mcdp_gap": self.mcdp_gap,
            "per_class": self.per_attribute[0].to_dict()["per_class"] if self.per_attribute else {},
            "per_attribute": [a.to_dict() for a in self.per_attribute],
            "dc_z_latent": self.dc_z_latent,
            "dc_z_latent_given_y": self.dc_z_latent_given_y,
            "config_hash": self.config_hash,
        }


def binary_columns(sensitive: np.ndarray) -> list[int]:
    sensitive = np.asarray(sensitive)
    if sensitive.ndim == 1:
        sensitive = sensitive[:, None]
    return [c for c in range(sensitive.shape[1])
            if np.all((sensitive[:, c] == 0) | (sensitive[:, c] == 1))]


def audit(preds: PredictionSet, attributes: list[int] | None = None,
          require: bool = True) -> FairnessReport:
    """Accuracy plus per-attribute TPR and MCDP gaps, each column audited independently.

    Without ``require``, a dataset with no binary sensitive column yields a
    report whose gap fields are ``None``.
    """
    if attributes is None:
        attributes = binary_columns(preds.sensitive)
        if not attributes:
            if require:
                raise MetricUndefinedError("no binary sensitive column to audit")
            return FairnessReport(accuracy(preds), None, None, [])
    rows = []
    for c in attributes:
        t = tpr_gap(preds, c)
        m = mcdp_gap(preds, c)
        rows.append(AttributeReport(c, t.aggregate, m.aggregate, t.per_class, m.per_class, t.excluded))
    return FairnessReport(
        accuracy(preds),
        float(np.mean([r.tpr_gap for r in rows])),
        float(np.mean([r.mcdp_gap for r in rows])),
        rows,
    )


def evaluate(model, dataset, attributes: list[int] | None = None, with_dc: bool = False,
             dc_max_samples: int = 2000, seed: int = 0, require: bool = True) -> FairnessReport:
    """Eval-mode forward on ``dataset`` followed by :func:`audit`.

    With ``with_dc`` the report also carries the distance covariance between
    Z and the latent, unconditional and given Y. Above ``dc_max_samples``
    rows the estimate is the mean over disjoint random blocks of at most that
    size (shuffled with ``seed``), which stays unbiased and keeps memory
    quadratic in the block size only.
    """
    from . import network
    from .dependence import dc_conditional, dc_fast

    latent, logp = network.forward(model, dataset.X, "eval")
    probs = np.exp(logp.value)
    # renormalize away the last-ulp drift of exp(log_softmax)
    probs /= probs.sum(axis=1, keepdims=True)
    report = audit(PredictionSet(probs, dataset.Y, dataset.Z), attributes, require)
    if with_dc:
        lat = latent.value
        blocks = dc_blocks(dataset.n, dc_max_samples, seed)
        report.dc_z_latent = float(np.mean(
            [dc_fast(dataset.Z[b], lat[b]).value for b in blocks]))
        report.dc_z_latent_given_y = float(np.mean(
            [dc_conditional(dataset.Z[b], lat[b], dataset.Y[b]).value for b in blocks]))
    return report


def dc_blocks(n: int, max_size: int, seed: int = 0) -> list[np.ndarray]:
    """Sorted index blocks of near-equal size covering ``range(n)``."""
    if n <= max_size:
        return [np.arange(n)]
    count = -(-n // max_size)
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(b) for b in np.array_split(perm, count)]
