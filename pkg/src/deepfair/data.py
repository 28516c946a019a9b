"""Datasets: CSV and matrix ingestion, splits, minibatches, synthetic generators."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)

MATRIX_HEADER = re.compile(rb"^DFLMAT v1 n=(\d+) p=(\d+) d=(\d+) K=(\d+)$")

BETA = np.array([
    [math.sqrt(2) / 2, math.sqrt(2) / 2, 0.0, 0.0],
    [math.sqrt(2) / 2, -math.sqrt(2) / 2, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
])

SKEWED_COMPOSITION = (0.4, 0.1, 0.1, 0.4)


class SchemaError(ValueError):
    pass


class VocabularyError(SchemaError):
    pass


class MissingValueError(SchemaError):
    pass


class MatrixFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class LabeledDataset:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.int64)
        z = np.asarray(self.Z, dtype=np.float64)
        self.Z = np.ascontiguousarray(z[:, None] if z.ndim == 1 else z)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ValueError(f"X must be n x p with p > 0, got {self.X.shape}")
        if self.Y.shape != (n,) or self.Z.shape[0] != n or self.Z.shape[1] < 1:
            raise ValueError("X, Y and Z disagree on the sample count")
        if n and (self.Y.min() < 0 or self.Y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def subset(self, index, note: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.intp)
        prov = dict(self.provenance)
        if note:
            prov["subset"] = note
        return LabeledDataset(self.X[index], self.Y[index], self.Z[index], self.num_classes, prov)

    def with_features(self, X) -> "LabeledDataset":
        return LabeledDataset(X, self.Y, self.Z, self.num_classes, dict(self.provenance))


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class Column:
    name: str
    role: str  # numeric | categorical | target | sensitive | ignore
    categories: list[str] | None = None
    threshold: float | None = None


@dataclass
class Schema:
    columns: list[Column]

    def __post_init__(self):
        roles = [c.role for c in self.columns]
        bad = set(roles) - {"numeric", "categorical", "target", "sensitive", "ignore"}
        if bad:
            raise SchemaError(f"unknown column roles {sorted(bad)}")
        if roles.count("target") != 1:
            raise SchemaError("schema needs exactly one target column")
        if roles.count("sensitive") < 1:
            raise SchemaError("schema needs at least one sensitive column")
        for c in self.columns:
            if c.role == "categorical" and not c.categories:
                raise SchemaError(f"categorical column {c.name!r} needs a vocabulary")
            if c.categories is not None and not c.categories:
                raise SchemaError(f"column {c.name!r} has an empty vocabulary")

    @classmethod
    def from_dict(cls, raw: dict) -> "Schema":
        return cls([Column(**c) for c in raw["columns"]])

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def feature_names(self) -> list[str]:
        names = []
        for c in self.columns:
            if c.role == "numeric":
                names.append(c.name)
            elif c.role == "categorical":
                names.extend(f"{c.name}={v}" for v in c.categories)
        return names


def _lookup(col: Column, value: str, row: int, strict: bool) -> int | None:
    try:
        return col.categories.index(value)
    except ValueError:
        if strict:
            raise VocabularyError(f"row {row}: {value!r} not in vocabulary of {col.name!r}") from None
        logger.warning("row %d: unknown category %r in %r; encoded as zeros", row, value, col.name)
        return None


def ingest_csv(path, schema: Schema, standardize: bool = True, stats_rows=None,
               strict: bool = True, missing: tuple[str, ...] = ("", "?", "NA")) -> LabeledDataset:
    """Read a headed CSV into a dataset.

    Numeric features are standardized with statistics from ``stats_rows``
    (all rows by default; pass the training indices to avoid leakage).
    Categorical features are one-hot in vocabulary order. The target is
    label-encoded by its vocabulary, or by sorted unique values when none is
    given. Sensitive columns with two categories become 0/1, with more they
    are one-hot; numeric sensitive columns are kept, or binarized as
    ``value > threshold`` when a threshold is set.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        header = [h.strip() for h in next(reader)]
        rows = [[v.strip() for v in r] for r in reader if r]
    pos = {h: i for i, h in enumerate(header)}
    for c in schema.columns:
        if c.role != "ignore" and c.name not in pos:
            raise SchemaError(f"column {c.name!r} missing from {path.name}")
    used = [c for c in schema.columns if c.role != "ignore"]
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        for c in used:
            if row[pos[c.name]] in missing:
                raise MissingValueError(f"row {r}: missing value in column {c.name!r}")

    n = len(rows)
    feats, sens = [], []
    target = None
    num_classes = 0
    numeric_cols = []
    for c in used:
        raw = [row[pos[c.name]] for row in rows]
        if c.role == "numeric":
            numeric_cols.append(len(feats))
            feats.append(np.array([float(v) for v in raw])[:, None])
        elif c.role == "categorical":
            block = np.zeros((n, len(c.categories)))
            for r, v in enumerate(raw):
                k = _lookup(c, v, r, strict)
                if k is not None:
                    block[r, k] = 1.0
            feats.append(block)
        elif c.role == "target":
            vocab = c.categories or sorted(set(raw))
            idx = {v: i for i, v in enumerate(vocab)}
            try:
                target = np.array([idx[v] for v in raw], dtype=np.int64)
            except KeyError as exc:
                raise VocabularyError(f"target value {exc.args[0]!r} not in vocabulary") from None
            num_classes = max(2, len(vocab))
        else:
            if c.categories:
                codes = [_lookup(c, v, r, True) for r, v in enumerate(raw)]
                if len(c.categories) == 2:
                    sens.append(np.array(codes, dtype=np.float64)[:, None])
                else:
                    block = np.zeros((n, len(c.categories)))
                    block[np.arange(n), codes] = 1.0
                    sens.append(block)
            else:
                vals = np.array([float(v) for v in raw])
                if c.threshold is not None:
                    vals = (vals > c.threshold).astype(np.float64)
                sens.append(vals[:, None])
    if not feats:
        raise SchemaError("schema selects no feature columns")
    X = np.hstack(feats)
    if standardize and numeric_cols:
        # numeric columns occupy the first slot of their block; recover their positions in X
        offsets = np.cumsum([0] + [f.shape[1] for f in feats])
        cols = [int(offsets[i]) for i in numeric_cols]
        ref = X if stats_rows is None else X[np.asarray(stats_rows)]
        mu = ref[:, cols].mean(axis=0)
        sd = ref[:, cols].std(axis=0)
        sd[sd == 0] = 1.0
        X[:, cols] = (X[:, cols] - mu) / sd
    return LabeledDataset(X, target, np.hstack(sens), num_classes,
                          {"source": str(path), "format": "csv", "standardized": standardize})


# ---------------------------------------------------------------------------
# representation-matrix files


def dumps_matrix(ds: LabeledDataset) -> bytes:
    head = f"DFLMAT v1 n={ds.n} p={ds.p} d={ds.d} K={ds.num_classes}\n".encode()
    return (head + ds.X.astype("<f8").tobytes() + ds.Z.astype("<f8").tobytes()
            + ds.Y.astype("<i4").tobytes())


def write_matrix(ds: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_matrix(ds))


def loads_matrix(data: bytes, source: str = "<bytes>") -> LabeledDataset:
    end = data.find(b"\n")
    m = MATRIX_HEADER.match(data[:end]) if end >= 0 else None
    if m is None:
        raise MatrixFormatError("missing or malformed DFLMAT header")
    n, p, d, k = (int(v) for v in m.groups())
    body = data[end + 1:]
    expected = 8 * n * p + 8 * n * d + 4 * n
    if len(body) != expected:
        raise MatrixFormatError(f"payload is {len(body)} bytes, header implies {expected}")
    X = np.frombuffer(body, "<f8", n * p).reshape(n, p)
    Z = np.frombuffer(body, "<f8", n * d, offset=8 * n * p).reshape(n, d)
    Y = np.frombuffer(body, "<i4", n, offset=8 * n * (p + d))
    try:
        return LabeledDataset(X.astype(np.float64), Y.astype(np.int64), Z.astype(np.float64), k,
                              {"source": source, "format": "DFLMAT v1"})
    except ValueError as exc:
        raise MatrixFormatError(str(exc)) from None


def ingest_matrix(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        return loads_matrix(fh.read(), str(path))


# ---------------------------------------------------------------------------
# splitting and batching


def split_indices(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  stratify: bool = False) -> list[np.ndarray]:
    """Row indices of each part: seeded shuffle, then contiguous cuts (per class when stratifying)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)

    def cut(index):
        bounds = np.round(np.cumsum(fractions) * index.size).astype(int)
        bounds[-1] = index.size
        return np.split(index, bounds[:-1])

    if stratify:
        parts = [[] for _ in fractions]
        for k in range(ds.num_classes):
            members = rng.permutation(np.flatnonzero(ds.Y == k))
            for i, piece in enumerate(cut(members)):
                parts[i].append(piece)
        parts = [rng.permutation(np.concatenate(p)) for p in parts]
    else:
        parts = cut(rng.permutation(ds.n))
    for i, idx in enumerate(parts):
        if idx.size == 0:
            raise ConfigError(f"split {i} is empty")
    return parts


def split(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
          stratify: bool = False) -> tuple[LabeledDataset, ...]:
    names = ["train", "val", "test"]
    parts = split_indices(ds, fractions, seed, stratify)
    return tuple(ds.subset(idx, names[i] if i < 3 else f"part{i}") for i, idx in enumerate(parts))


def _usable_tail(labels: np.ndarray) -> bool:
    if labels.size < 2:
        return False
    return np.bincount(labels).max() >= 4


def batches(labels, batch_size: int, seed, stratified: bool = False) -> Iterator[np.ndarray]:
    """Yield index arrays covering a seeded permutation of ``0..n-1``.

    ``labels`` may be a dataset or its label vector. A short final batch is
    kept only if some class has at least four samples in it; otherwise it is
    dropped. Stratified mode orders samples so every class is spread evenly
    across the epoch before cutting.
    """
    y = labels.Y if isinstance(labels, LabeledDataset) else np.asarray(labels)
    n = y.size
    if batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds sample count {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if stratified:
        pos = np.empty(n)
        for k in np.unique(y):
            members = np.flatnonzero(y == k)
            pos[rng.permutation(members)] = (np.arange(members.size) + 0.5) / members.size
        order = np.lexsort((rng.random(n), pos))
    else:
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < batch_size and not _usable_tail(y[idx]):
            return
        yield idx


# ---------------------------------------------------------------------------
# synthetic generators


def gen_toy_sdr(n: int, noise_sd: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Four-dimensional toy model with a known fair subspace.

    ``Z = sin(b1'X) + exp(-b2'X) + eps`` depends on X only through
    span{b1, b2}; the label ``Y = 1[b3'X + b4'X > 0]`` lives entirely in the
    complementary span{b3, b4}.
    """
    if n < 1:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    eps = rng.normal(0.0, noise_sd, n) if noise_sd > 0 else np.zeros(n)
    Z = toy_sensitive(X) + eps
    Y = ((X @ BETA[2] + X @ BETA[3]) > 0).astype(np.int64)
    prov = {"generator": "toy", "n": n, "noise_sd": noise_sd, "seed": seed,
            "beta": BETA.tolist(), "sufficient_subspace": [0, 1], "fair_subspace": [2, 3]}
    return LabeledDataset(X, Y, Z, 2, prov)


def toy_sensitive(X: np.ndarray) -> np.ndarray:
    return np.sin(X @ BETA[0]) + np.exp(-(X @ BETA[1]))


def _directions(p: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(rng.standard_normal((p, 2)))
    return q[:, 0], q[:, 1]


def gen_biased_classification(n: int, p: int = 8, bias_strength: float = 1.0, seed: int = 0,
                              composition=SKEWED_COMPOSITION, signal: float = 1.0,
                              directions_seed: int | None = None) -> LabeledDataset:
    """Binary (Y, Z) with a planted label direction and a sensitive direction.

    ``composition`` gives P(Y=1,Z=1), P(Y=1,Z=0), P(Y=0,Z=1), P(Y=0,Z=0);
    the default mirrors a 40/10/10/40 skew. Each row is
    ``signal*(2Y-1)*u + bias_strength*(2Z-1)*v + noise`` with orthonormal
    ``u``, ``v`` drawn from ``directions_seed`` (default ``seed``), so
    several datasets can share one geometry.
    """
    if p < 4:
        raise ConfigError("gen_biased_classification needs p >= 4")
    comp = np.asarray(composition, dtype=np.float64)
    if comp.shape != (4,) or np.any(comp < 0) or abs(comp.sum() - 1) > 1e-9:
        raise ConfigError("composition must be four nonnegative cell probabilities summing to 1")
    dseed = seed if directions_seed is None else directions_seed
    u, v = _directions(p, dseed)
    rng = np.random.default_rng([seed, 2])
    cell = rng.choice(4, size=n, p=comp)
    Y = (cell < 2).astype(np.int64)
    Z = (cell % 2 == 0).astype(np.float64)
    X = (signal * (2 * Y - 1)[:, None] * u + bias_strength * (2 * Z - 1)[:, None] * v
         + rng.standard_normal((n, p)))
    prov = {"generator": "biased", "n": n, "p": p, "bias_strength": bias_strength,
            "signal": signal, "seed": seed, "directions_seed": dseed,
            "composition": comp.tolist(), "y_direction": u.tolist(), "z_direction": v.tolist()}
    return LabeledDataset(X, Y, Z, 2, prov)
