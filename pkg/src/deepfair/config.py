"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import ConfigError
from .network import NetworkSpec
from .training import TrainConfig


@dataclass
class RunConfig:
    # data source: matrix | csv | synthetic
    data_format: str = "synthetic"
    data_path: str = ""
    schema_path: str = ""
    standardize: bool = True
    generator: str = "biased"
    n: int = 2000
    p: int = 8
    bias_strength: float = 3.0
    signal: float = 1.5
    noise_sd: float = 0.1
    data_seed: int = 0
    split: str = "0.8,0.1,0.1"
    split_seed: int = 0
    stratify_split: bool = False
    # separate synthetic test set sharing the generator geometry; off when 0
    test_n: int = 0
    test_composition: str = "0.25,0.25,0.25,0.25"
    # network
    growth_rate: int = 20
    depth: int = 10
    reduction: float = 0.2
    probe_hidden: int = 64
    # training
    criterion: str = "separation"
    alpha: float = 0.5
    lambda_mu_form: bool = False
    lam: float = 0.0
    mu: float = 0.0
    retain_y: bool = True
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    seed: int = 0
    stratified_batches: bool = False
    # run
    out_dir: str = "dfl_run"
    deterministic: bool = False

    def split_fractions(self) -> tuple[float, ...]:
        try:
            return tuple(float(v) for v in self.split.split(","))
        except ValueError:
            raise ConfigError(f"split must be comma-separated fractions, got {self.split!r}") from None

    def test_cells(self) -> tuple[float, ...]:
        try:
            cells = tuple(float(v) for v in self.test_composition.split(","))
        except ValueError:
            cells = ()
        if len(cells) != 4:
            raise ConfigError(f"test_composition needs four fractions, got {self.test_composition!r}")
        return cells

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                criterion=self.criterion, alpha=self.alpha, lambda_mu_form=self.lambda_mu_form,
                lam=self.lam, mu=self.mu, retain_y=self.retain_y, lr=self.lr, epochs=self.epochs,
                batch_size=self.batch_size, optimizer=self.optimizer, seed=self.seed,
                stratified_batches=self.stratified_batches,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def network_spec(self, input_dim: int, num_classes: int) -> NetworkSpec:
        try:
            return NetworkSpec(input_dim, num_classes, self.growth_rate, self.depth, self.reduction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved().encode()).hexdigest()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
