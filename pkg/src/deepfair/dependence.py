"""Unbiased distance covariance and its class-weighted conditional version.

Three routes compute the same U-statistic:

* :func:`dc_naive` averages the four-point kernel over every 4-subset. It is
  O(n^4) and exists as the reference.
* :func:`dc_fast` uses U-centered distance matrices, O(n^2).
* :func:`dc_fast_node` is the differentiable form used inside the training
  loss; :func:`dc_fast` is literally its forward value.

Estimates can be negative. Nothing here clamps them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import autodiff as ad
from .autodiff import Node

NAIVE_MAX_N = 64
MIN_SAMPLES = 4


class InsufficientSamplesError(ValueError):
    """Fewer than four samples are available for a U-statistic."""


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class DCEstimate:
    value: float
    n_used: int
    method: str


@dataclass(frozen=True)
class ClassTerm:
    label: int
    n: int
    weight: float
    value: float


@dataclass
class ConditionalDCEstimate:
    value: float
    per_class: list[ClassTerm]
    skipped_classes: list[int] = field(default_factory=list)


def as_samples(values) -> np.ndarray:
    """Coerce to an n x d float64 matrix (vectors become one column)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a 1-d or 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples contain NaN or infinite values")
    return np.ascontiguousarray(arr)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise EncodingError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise EncodingError(f"label {bad} outside 0..{num_classes - 1}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(np.intp)] = 1.0
    return out


def _check_pair(z: np.ndarray, x: np.ndarray) -> int:
    if z.shape[0] != x.shape[0]:
        raise ValueError(f"sample counts differ: {z.shape[0]} vs {x.shape[0]}")
    n = z.shape[0]
    if n < MIN_SAMPLES:
        raise InsufficientSamplesError(f"distance covariance needs n >= 4, got n={n}")
    return n


def _kernel(a: np.ndarray, b: np.ndarray) -> float:
    """Four-point kernel on 4x4 distance blocks ``a`` (Z) and ``b`` (X)."""
    paired = (a * b).sum() / 4.0
    marginal = a.sum() * b.sum() / 24.0
    rowwise = (a.sum(axis=1) * b.sum(axis=1)).sum() / 4.0
    return paired + marginal - rowwise


def dc_naive(z, x) -> DCEstimate:
    """Average of the four-point kernel over all C(n, 4) subsets.

    Restricted to ``n <= 64``; use it as an oracle, not in training.
    """
    z, x = as_samples(z), as_samples(x)
    n = _check_pair(z, x)
    if n > NAIVE_MAX_N:
        raise ValueError(f"dc_naive is limited to n <= {NAIVE_MAX_N}, got n={n}")
    a = squareform(pdist(z))
    b = squareform(pdist(x))
    acc = 0.0
    for idx in itertools.combinations(range(n), 4):
        sel = np.ix_(idx, idx)
        acc += _kernel(a[sel], b[sel])
    return DCEstimate(acc / comb(n, 4), n, "naive")


def _u_centered_distances(z: np.ndarray) -> np.ndarray:
    return ad.u_center(ad.pairwise_distances(z)).value


def dc_fast_node(z, x: Node) -> Node:
    """Differentiable U-centered estimate, gradient flowing into ``x`` only."""
    z = as_samples(z)
    if not isinstance(x, Node):
        x = ad.constant(as_samples(x))
    n = _check_pair(z, x.value)
    a_tilde = _u_centered_distances(z)
    b_tilde = ad.u_center(ad.pairwise_distances(x))
    return ad.scale(ad.total(ad.mul(a_tilde, b_tilde)), 1.0 / (n * (n - 3)))


def dc_fast(z, x) -> DCEstimate:
    """O(n^2) unbiased distance covariance via U-centering."""
    x = as_samples(x)
    node = dc_fast_node(z, ad.constant(x))
    return DCEstimate(float(node.value), x.shape[0], "fast")


def class_weights(counts: dict[int, int]) -> dict[int, float]:
    """``C(n_k, 4) / sum_j C(n_j, 4)`` over classes with ``n_k >= 4``."""
    combs = {k: comb(n, 4) for k, n in counts.items() if n >= MIN_SAMPLES}
    if not combs:
        raise InsufficientSamplesError(f"no class has 4 or more samples (counts {dict(counts)})")
    denom = sum(combs.values())
    return {k: c / denom for k, c in combs.items()}


def _partition(y, n: int, num_classes: int | None):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    labels = range(num_classes) if num_classes is not None else np.unique(y).tolist()
    groups = {int(k): np.flatnonzero(y == k) for k in labels}
    return groups


def dc_conditional(z, x, y, num_classes: int | None = None):
    """Class-weighted conditional distance covariance.

    Returns a :class:`ConditionalDCEstimate` for array input and a scalar
    :class:`Node` when ``x`` is a node. Classes with fewer than four samples
    get zero weight; they are listed in ``skipped_classes`` for array input.
    """
    z = as_samples(z)
    as_node = isinstance(x, Node)
    xv = x.value if as_node else as_samples(x)
    if z.shape[0] != xv.shape[0]:
        raise ValueError(f"sample counts differ: {z.shape[0]} vs {xv.shape[0]}")
    groups = _partition(y, z.shape[0], num_classes)
    weights = class_weights({k: idx.size for k, idx in groups.items()})
    skipped = [k for k in groups if k not in weights]

    if as_node:
        out = None
        for k in sorted(weights):
            idx = groups[k]
            term = ad.scale(dc_fast_node(z[idx], ad.take_rows(x, idx)), weights[k])
            out = term if out is None else ad.add(out, term)
        return out

    terms = []
    value = 0.0
    for k in sorted(weights):
        idx = groups[k]
        est = dc_fast(z[idx], xv[idx]).value
        terms.append(ClassTerm(k, int(idx.size), weights[k], est))
        value += weights[k] * est
    return ConditionalDCEstimate(value, terms, skipped)
