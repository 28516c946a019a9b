"""Fair fine-tuning objectives, optimizers and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network
from .data import LabeledDataset, batches
from .dependence import InsufficientSamplesError, dc_conditional, dc_fast_node, one_hot
from .metrics import MetricUndefinedError, evaluate
from .network import ModelParams, NetworkSpec

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["epoch", "loss", "ce", "dc_z", "dc_y", "test_accuracy", "tpr_gap", "mcdp_gap"]


class BatchError(ValueError):
    """A minibatch cannot support the requested penalty terms."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    The default objective is the alpha form
    ``alpha*(CE - DC(Y, latent)) + (1 - alpha)*fairness_penalty``. With
    ``lambda_mu_form`` set, ``CE + lam*penalty - mu*DC(Y, latent)`` is used
    instead. ``retain_y=False`` drops the DC(Y, latent) term in the alpha
    form.
    """

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

    def __post_init__(self):
        if self.criterion not in ("independence", "separation"):
            raise ValueError(f"criterion must be independence or separation, got {self.criterion!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lambda_mu_form:
            if self.lam < 0 or self.mu < 0:
                raise ValueError("lam and mu must be nonnegative")
        elif not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0:
            raise ValueError("epochs >= 1, batch_size >= 2 and lr > 0 are required")

    @property
    def penalty_off(self) -> bool:
        if self.lambda_mu_form:
            return self.lam == 0 and self.mu == 0
        return self.alpha == 1.0 and not self.retain_y

    def weights(self) -> tuple[float, float, float]:
        """Coefficients ``(ce, penalty, retention)`` of the total loss."""
        if self.lambda_mu_form:
            return 1.0, self.lam, self.mu
        a = self.alpha
        return a, 1.0 - a, a if self.retain_y else 0.0


STANDARD = TrainConfig(lambda_mu_form=True, lam=0.0, mu=0.0)


@dataclass
class LossParts:
    total: ad.Node
    ce: float
    dc_z: float
    dc_y: float


def cross_entropy(logprobs: ad.Node, y) -> ad.Node:
    """Mean negative log-probability of the true class."""
    y = np.asarray(y)
    n, k = logprobs.shape
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    if n and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    return ad.scale(ad.total(ad.pick(logprobs, y)), -1.0 / n)


def _objective(model: ModelParams, X, Y, Z, weights, criterion: str, num_classes: int,
               mode: str = "train") -> LossParts:
    w_ce, w_pen, w_ret = weights
    latent, logp = network.forward(model, X, mode)
    ce = cross_entropy(logp, Y)
    total = ad.scale(ce, w_ce) if w_ce != 1.0 else ce
    dc_z = dc_y = 0.0
    if w_pen == 0 and w_ret == 0:
        return LossParts(total, float(ce.value), dc_z, dc_y)
    n = latent.shape[0]
    if w_pen != 0:
        try:
            if criterion == "separation":
                pen = dc_conditional(Z, latent, Y, num_classes)
            else:
                pen = dc_fast_node(Z, latent)
        except InsufficientSamplesError as exc:
            counts = np.bincount(np.asarray(Y), minlength=num_classes).tolist()
            raise BatchError(f"batch of {n} with class counts {counts}: {exc}") from None
        dc_z = float(pen.value)
        total = ad.add(total, ad.scale(pen, w_pen))
    if w_ret != 0:
        if n < 4:
            raise BatchError(f"batch of {n} is too small for DC(Y, latent)")
        ret = dc_fast_node(one_hot(Y, num_classes), latent)
        dc_y = float(ret.value)
        total = ad.sub(total, ad.scale(ret, w_ret))
    return LossParts(total, float(ce.value), dc_z, dc_y)


def loss_independence(model: ModelParams, X, Y, Z, weights=(1.0, 0.0, 0.0),
                      num_classes: int | None = None, mode: str = "train") -> LossParts:
    """``w_ce*CE + w_pen*DC(Z, latent) - w_ret*DC(onehot(Y), latent)``."""
    k = num_classes or model.output_classes
    return _objective(model, X, Y, Z, weights, "independence", k, mode)


def loss_separation(model: ModelParams, X, Y, Z, weights=(1.0, 0.0, 0.0),
                    num_classes: int | None = None, mode: str = "train") -> LossParts:
    """``w_ce*CE + w_pen*DC(Z, latent | Y) - w_ret*DC(onehot(Y), latent)``."""
    k = num_classes or model.output_classes
    return _objective(model, X, Y, Z, weights, "separation", k, mode)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def step(state: OptimizerState, params: dict[str, ad.Node], grads: dict[str, np.ndarray],
         lr: float) -> None:
    """Update ``params`` in place from ``grads``; missing gradients count as zero."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.value.shape}")
        if state.kind == "sgd":
            p.value = p.value - lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** state.t)
        v_hat = v / (1 - state.beta2 ** state.t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    dc_z: float
    dc_y: float
    test_accuracy: float
    tpr_gap: float
    mcdp_gap: float


def _test_metrics(model, test: LabeledDataset | None) -> tuple[float, float, float]:
    if test is None:
        return math.nan, math.nan, math.nan
    try:
        r = evaluate(model, test, require=False)
    except MetricUndefinedError:
        return math.nan, math.nan, math.nan
    nan_if_none = lambda v: math.nan if v is None else v  # noqa: E731
    return r.accuracy, nan_if_none(r.tpr_gap), nan_if_none(r.mcdp_gap)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(train_set: LabeledDataset, spec: NetworkSpec | None, cfg: TrainConfig,
          test_set: LabeledDataset | None = None, model: ModelParams | None = None,
          checkpoint_dir: str | Path | None = None) -> tuple[ModelParams, list[EpochRecord]]:
    """Minibatch training of both parameter groups.

    Record 0 describes the untrained model (loss parts averaged over one
    eval-mode pass of the epoch-1 batch schedule); records 1..epochs follow
    each training epoch. Test metrics come from an eval-mode pass over
    ``test_set``.
    """
    if model is None:
        if spec is None:
            raise ValueError("either spec or model is required")
        model = network.build(spec, cfg.seed)
    if train_set.p != model.input_dim:
        raise ValueError(f"dataset has {train_set.p} features, model expects {model.input_dim}")
    weights = cfg.weights()
    opt = OptimizerState(kind=cfg.optimizer)
    params = model.parameters()
    k = model.output_classes

    def run_epoch(epoch: int, update: bool) -> EpochRecord:
        rng = _epoch_rng(cfg.seed, max(epoch, 1))
        sums = np.zeros(4)
        count = 0
        for idx in batches(train_set.Y, cfg.batch_size, rng, cfg.stratified_batches):
            parts = _objective(model, train_set.X[idx], train_set.Y[idx], train_set.Z[idx],
                               weights, cfg.criterion, k, "train" if update else "eval")
            value = float(parts.total.value)
            if not math.isfinite(value):
                ckpt = None
                if checkpoint_dir is not None:
                    ckpt = str(Path(checkpoint_dir) / "last_good.dflm")
                    network.save(last_good, ckpt)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", ckpt)
            if update:
                model.zero_grad()
                parts.total.backward()
                step(opt, params, {n: p.grad for n, p in params.items() if p.grad is not None}, cfg.lr)
            sums += (value, parts.ce, parts.dc_z, parts.dc_y)
            count += 1
        sums /= max(count, 1)
        acc, tpr, mcdp = _test_metrics(model, test_set)
        return EpochRecord(epoch, *sums.tolist(), acc, tpr, mcdp)

    last_good = model.copy() if checkpoint_dir is not None else model
    records = [run_epoch(0, update=False)]
    for epoch in range(1, cfg.epochs + 1):
        records.append(run_epoch(epoch, update=True))
        if checkpoint_dir is not None:
            last_good = model.copy()
    return model, records


def train_standard(train_set: LabeledDataset, cfg: TrainConfig, hidden: int = 64,
                   test_set: LabeledDataset | None = None) -> tuple[ModelParams, list[EpochRecord]]:
    """One-hidden-layer classifier trained with plain cross-entropy."""
    probe = network.build_probe(train_set.p, hidden, train_set.num_classes, cfg.seed)
    plain = replace(cfg, lambda_mu_form=True, lam=0.0, mu=0.0)
    return train(train_set, None, plain, test_set, model=probe)


def trajectory_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for r in records:
        row = asdict(r)
        w.writerow([r.epoch] + [repr(float(row[c])) for c in TRAJECTORY_COLUMNS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# alpha selection


@dataclass
class Candidate:
    alpha: float
    accuracy: float
    tpr_gap: float
    mcdp_gap: float
    passes: bool

    @property
    def criterion(self) -> float:
        return (self.tpr_gap + self.mcdp_gap) / 2


@dataclass
class SelectionReport:
    chosen: float
    baseline_accuracy: float
    threshold: float
    candidates: list[Candidate]
    flagged: bool

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "accuracy", "tpr_gap", "mcdp_gap", "criterion", "passes_filter"])
        for c in self.candidates:
            w.writerow([repr(c.alpha), repr(c.accuracy), repr(c.tpr_gap), repr(c.mcdp_gap),
                        repr(c.criterion), int(c.passes)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "chosen_alpha": self.chosen,
            "baseline_accuracy": self.baseline_accuracy,
            "accuracy_threshold": self.threshold,
            "flagged": self.flagged,
            "candidates": [dict(asdict(c), criterion=c.criterion) for c in self.candidates],
        }


def choose(candidates: list[Candidate], baseline_accuracy: float) -> SelectionReport:
    """Lowest mean gap among candidates reaching 95% of the baseline accuracy."""
    if not candidates:
        raise ValueError("no alpha candidates to choose from")
    threshold = 0.95 * baseline_accuracy
    for c in candidates:
        c.passes = c.accuracy >= threshold
    passing = [c for c in candidates if c.passes]
    if passing:
        best = min(passing, key=lambda c: c.criterion)
        return SelectionReport(best.alpha, baseline_accuracy, threshold, candidates, False)
    best = max(candidates, key=lambda c: c.accuracy)
    logger.warning("no alpha reaches 95%% of baseline accuracy; falling back to the most accurate")
    return SelectionReport(best.alpha, baseline_accuracy, threshold, candidates, True)


def candidate_seed(master: int, index: int) -> int:
    """Independent per-candidate seed derived from the master seed."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _fit_candidate(args):
    alpha, train_set, val_set, spec, cfg = args
    model, _ = train(train_set, spec, replace(cfg, alpha=alpha, lambda_mu_form=False))
    r = evaluate(model, val_set)
    return Candidate(alpha, r.accuracy, r.tpr_gap, r.mcdp_gap, False)


def select_alpha(alphas, train_set: LabeledDataset, val_set: LabeledDataset, spec: NetworkSpec,
                 cfg: TrainConfig, hidden: int = 64, workers: int = 1) -> SelectionReport:
    """Train one model per alpha and pick by validation gaps under an accuracy floor."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("empty alpha candidate list")
    base, _ = train_standard(train_set, cfg, hidden)
    baseline_acc = evaluate(base, val_set).accuracy
    jobs = [(a, train_set, val_set, spec, replace(cfg, seed=candidate_seed(cfg.seed, i)))
            for i, a in enumerate(alphas)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(_fit_candidate, jobs))
    else:
        candidates = [_fit_candidate(j) for j in jobs]
    return choose(candidates, baseline_acc)
