"""Alternating two-branch training with freezing rules and early stopping."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field

from .data import DataError, apply_missingness
from .evalkit import UndefinedMetricError, f1_macro, labels_of, predict_scores
from .losses import mul_loss, sgl_loss
from .model import BDModel, ModelDims, check_role
from .numcore import ConfigError, ParamStore, RngStream, SgdState, sgd_step

MONITORS = ("val-F1", "train-F1")
BASELINE_KINDS = ("filling", "ae", "ensemble", "image-only", "clinical-only")


class FreezeViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    lambda_m: float = 0.6
    lambda_s: float = 0.5
    tau: float = 1.2
    lr: float = 1e-4
    momentum: float = 0.3
    weight_decay: float = 1e-3
    prompt_length: int = 50
    max_epochs: int = 100
    patience: int = 10
    monitor: str = "val-F1"
    seed: int = 0
    missing_role: str = "clinical"
    expansion: int = 20
    d_h: int = 128
    grad_accum: int = 1
    ensemble_alpha: float = 0.5
    ae_hidden: int = 64
    threshold: float = 0.5
    check_freezing: bool = False

    def validate(self):
        for name in ("lambda_m", "lambda_s", "lr", "weight_decay", "ensemble_alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.prompt_length < 1 or self.expansion < 1 or self.d_h < 1 or self.grad_accum < 1:
            raise ConfigError("prompt_length, expansion, d_h and grad_accum must be >= 1")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}")
        if self.ensemble_alpha > 1:
            raise ConfigError("ensemble_alpha must lie in [0, 1]")
        check_role(self.missing_role)
        return self

    def dims(self, d_w: int, d_c: int = 5) -> ModelDims:
        return ModelDims(d_w=d_w, d_c=d_c, d_h=self.d_h, expansion=self.expansion,
                         prompt_length=self.prompt_length)

    def sgd(self) -> SgdState:
        return SgdState(self.lr, self.momentum, self.weight_decay)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    best_metric: float = float("-inf")
    columns: tuple = ("epoch", "mul_c", "mul_f", "sgl_c", "sgl_f", "monitored_metric")
    stages: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(r.get(c, float("nan"))) for c in self.columns])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"best_epoch": self.best_epoch, "stop_epoch": self.stop_epoch,
               "best_metric": self.best_metric, "epochs_run": len(self.rows)}
        if self.stages:
            out["stages"] = self.stages
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _cell(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _require_complete(batch):
    for s in batch:
        if not s.complete:
            raise DataError(f"training sample {s.sample_id!r} is missing a modality; training needs complete pairs")


def _scale_grads(params: ParamStore, factor):
    if factor != 1.0:
        for _, p in params.items():
            p.grad *= factor


def multi_step_params(model: BDModel) -> ParamStore:
    """Parameters updated by the multi-modal step: the multi branch and M_sgl."""
    sgl_proj = model.single.params.subset([n for n in model.single.params if n.startswith("sgl.proj.")])
    return ParamStore.merge(model.multi.params, sgl_proj)


def single_step_params(model: BDModel) -> ParamStore:
    return model.single.params.subset([n for n in model.single.params if not n.startswith("sgl.proj.")])


def train_step_multi(batch, model: BDModel, cfg: TrainConfig, opt: SgdState, params=None):
    """One SGD step on L_mul over ``batch`` (multi branch + M_sgl only)."""
    _require_complete(batch)
    params = params or multi_step_params(model)
    parts = {"mul_c": 0.0, "mul_f": 0.0}
    total = 0.0
    for s in batch:
        b = mul_loss(model.multi, model.single, s, cfg.lambda_m)
        total += b.total
        for k in parts:
            parts[k] += b.parts[k]
    n = len(batch)
    _scale_grads(params, 1.0 / n)
    sgd_step(params, opt)
    return total / n, {k: v / n for k, v in parts.items()}


def train_step_single(batch, model: BDModel, cfg: TrainConfig, opt: SgdState, params=None):
    """One SGD step on L_sgl over ``batch``; the multi branch only acts as a teacher."""
    params = params or single_step_params(model)
    parts = {"sgl_c": 0.0, "sgl_f": 0.0}
    total = 0.0
    for s in batch:
        b = sgl_loss(model.single, model.multi, s, cfg.lambda_s, cfg.tau)
        total += b.total
        for k in parts:
            parts[k] += b.parts[k]
    n = len(batch)
    _scale_grads(params, 1.0 / n)
    sgd_step(params, opt)
    return total / n, {k: v / n for k, v in parts.items()}


def batches(samples, size, rng: RngStream):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), size):
        yield [samples[j] for j in order[i:i + size]]


def safe_f1(model, samples, threshold=0.5):
    if not samples:
        return 0.0
    try:
        return f1_macro(predict_scores(model, samples), labels_of(samples), threshold)
    except UndefinedMetricError:
        return 0.0


def bd_monitor(model: BDModel, samples, cfg: TrainConfig) -> float:
    """Mean macro-F1 of the multi route (all complete) and the single route (all masked)."""
    masked = apply_missingness(samples, 1.0, cfg.missing_role, 0)
    return 0.5 * (safe_f1(model, samples, cfg.threshold) + safe_f1(model, masked, cfg.threshold))


class EarlyStopper:
    """Tracks the best monitored value (ties keep the earliest epoch) and a snapshot."""

    def __init__(self, patience, params: ParamStore):
        self.patience = patience
        self.params = params
        self.best = float("-inf")
        self.best_epoch = 0
        self.snapshot = params.snapshot()
        self.bad = 0

    def update(self, epoch, value) -> bool:
        """Record ``value`` for ``epoch``; returns True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            self.snapshot = self.params.snapshot()
        else:
            self.bad += 1
        return self.bad > self.patience

    def restore(self):
        self.params.load(self.snapshot)


def fit(steps, monitor_fn, train_set, params: ParamStore, cfg: TrainConfig, rng: RngStream,
        log: TrainLog | None = None) -> TrainLog:
    """Generic epoch loop.

    ``steps(batch) -> dict`` performs the optimizer step(s) for one batch and
    returns sub-loss values; ``monitor_fn() -> float`` is evaluated after every
    epoch (higher is better).  The best epoch's parameters are restored.
    """
    if not train_set:
        raise DataError("training set is empty")
    log = log or TrainLog()
    stopper = EarlyStopper(cfg.patience, params)
    shuffle = rng.substream("shuffle")
    for epoch in range(1, cfg.max_epochs + 1):
        sums, count = {}, 0
        for batch in batches(train_set, cfg.grad_accum, shuffle):
            for k, v in steps(batch).items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        metric = monitor_fn()
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, "monitored_metric": metric}
        log.rows.append(row)
        log.stop_epoch = epoch
        if stopper.update(epoch, metric):
            break
    stopper.restore()
    log.best_epoch, log.best_metric = stopper.best_epoch, stopper.best
    return log


def train_bd(train_set, val_set, cfg: TrainConfig, d_w=None, d_c=5):
    """Train both branches; per batch a multi step then a single step.

    Returns ``(model, log)`` with the parameters of the best monitored epoch.
    """
    cfg.validate()
    if not train_set:
        raise DataError("training set is empty")
    _require_complete(train_set)
    d_w = d_w or train_set[0].bag.shape[1]
    rng = RngStream(cfg.seed, "train")
    model = BDModel(cfg.dims(d_w, d_c), rng.substream("init"), cfg.missing_role)
    p_multi, p_single = multi_step_params(model), single_step_params(model)
    opt_multi, opt_single = cfg.sgd(), cfg.sgd()

    def steps(batch):
        if cfg.check_freezing:
            before = p_single.digest()
        _, parts_m = train_step_multi(batch, model, cfg, opt_multi, p_multi)
        if cfg.check_freezing:
            if p_single.digest() != before:
                raise FreezeViolation("multi step changed single-branch parameters")
            before = model.multi.params.digest()
        _, parts_s = train_step_single(batch, model, cfg, opt_single, p_single)
        if cfg.check_freezing and model.multi.params.digest() != before:
            raise FreezeViolation("single step changed multi-branch parameters")
        return {**parts_m, **parts_s}

    monitor_set = val_set if cfg.monitor == "val-F1" else train_set
    log = fit(steps, lambda: bd_monitor(model, monitor_set, cfg), train_set, model.params, cfg, rng)
    return model, log


def train_baseline(kind, train_set, val_set, cfg: TrainConfig, d_w=None, d_c=5):
    """Dispatch to the baseline trainers; returns ``(model, log)``."""
    from . import baselines

    trainers = {
        "filling": baselines.train_filling,
        "ae": baselines.train_ae,
        "ensemble": baselines.train_ensemble,
        "image-only": baselines.train_image_only,
        "clinical-only": baselines.train_clinical_only,
    }
    if kind not in trainers:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {sorted(trainers)}")
    cfg.validate()
    if not train_set:
        raise DataError("training set is empty")
    _require_complete(train_set)
    d_w = d_w or train_set[0].bag.shape[1]
    return trainers[kind](train_set, val_set, cfg, d_w, d_c)


def monitor_samples(train_set, val_set, cfg):
    return val_set if cfg.monitor == "val-F1" else train_set
