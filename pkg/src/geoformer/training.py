"""
Optimisation loop: mini-batch Adam with decoupled weight decay, plateau
learning-rate decay, chronological validation and best-checkpoint tracking.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import GeoTransformer
from .simulate import Windows

log = logging.getLogger(__name__)

KERNEL_PARAMS = ("theta_rho", "theta_lambda")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-6
    min_lr: float = 1e-6
    val_fraction: float = 0.2
    grad_clip: float = 5.0
    kernel_lr_scale: float = 1.0
    early_stopping: int | None = None  # epochs without validation improvement before stopping
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.early_stopping is not None and self.early_stopping < 1:
            raise ValueError("early_stopping must be >= 1 or None")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse of empty vectors")
    r = pred - target
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0, no_decay=KERNEL_PARAMS,
              lr_scale: dict | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` (name -> ndarray).

    Weight decay is decoupled (``p -= lr * wd * p``) and skipped for names
    in ``no_decay``.  ``lr_scale`` optionally multiplies the step size of
    individual parameters.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * lr_scale.get(name, 1.0) if lr_scale else lr
        if weight_decay and name not in no_decay:
            p -= step * weight_decay * p
        p -= step * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# plateau scheduler
# ---------------------------------------------------------------------------


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 5
    threshold: float = 1e-6
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise ValueError("validation loss must be finite")
        if val_loss < self.best * (1.0 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

TRAINLOG_COLUMNS = ["epoch", "train_mse", "val_mse", "lr", "rho", "lambda", "geo_bias_share", "seconds"]


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    rho: float | None
    lam: float | None
    geo_bias_share: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    initial_rho: float | None = None
    diverged: bool = False
    message: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        attr = "lam" if name == "lambda" else name
        return np.array([getattr(r, attr) for r in self.records], dtype=float)

    def to_csv(self, path, include_kernel: bool = True) -> Path:
        path = Path(path)
        cols = TRAINLOG_COLUMNS if include_kernel else [c for c in TRAINLOG_COLUMNS if c not in ("rho", "lambda", "geo_bias_share")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                row = {"epoch": r.epoch, "train_mse": r.train_mse, "val_mse": r.val_mse, "lr": r.lr, "rho": r.rho,
                       "lambda": r.lam, "geo_bias_share": r.geo_bias_share, "seconds": r.seconds}
                w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c] for c in cols])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                g = lambda k: float(row[k]) if k in row and row[k] not in ("", "None") else None  # noqa: E731
                out.records.append(EpochRecord(int(row["epoch"]), g("train_mse"), g("val_mse"), g("lr"), g("rho"),
                                               g("lambda"), g("geo_bias_share"), g("seconds")))
        return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def chronological_split(windows: Windows, val_fraction: float) -> tuple[Windows, Windows]:
    order = np.argsort(windows.target_index, kind="stable")
    n_val = int(round(len(order) * val_fraction))
    if val_fraction > 0 and n_val == 0 and len(order) > 1:
        n_val = 1
    cut = len(order) - n_val
    return windows.subset(order[:cut]), windows.subset(order[cut:])


def evaluate_mse(model: GeoTransformer, windows: Windows, batch_size: int = 64) -> float:
    if len(windows) == 0:
        return math.nan
    tot = 0.0
    for s in range(0, len(windows), batch_size):
        pred = model.predict(windows.inputs[s:s + batch_size])
        r = pred - windows.targets[s:s + batch_size]
        tot += float((r * r).sum())
    return tot / windows.targets.size


def _clip(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


def _bias_share(model: GeoTransformer, sample) -> float | None:
    if not model.is_geo:
        return None
    rec = model.attention_maps(sample)
    return float(np.mean([r.geo_bias_share for r in rec]))


def train(model: GeoTransformer, windows: Windows, config: TrainConfig, callback=None):
    """Fit ``model`` on ``windows``; returns ``(model, TrainLog)``.

    The chronologically last ``val_fraction`` of the windows is held out.
    The best-validation parameters are restored before returning, and the
    model's residual-variance floor is set from the training residuals.
    """
    config.validate()
    log_ = TrainLog(initial_rho=_scalar(model.rho))
    if len(windows) == 0:
        raise TrainingError("no training windows")
    if config.max_epochs == 0:
        return model, log_
    tr, va = chronological_split(windows, config.val_fraction)
    if len(tr) == 0:
        raise TrainingError("validation split left no training windows")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.plateau_threshold,
                             config.min_lr)
    best_val, best_state = math.inf, model.state_dict()
    last_finite = model.state_dict()
    kscale = {k: config.kernel_lr_scale for k in KERNEL_PARAMS}
    monitor = va if len(va) else tr
    probe = monitor.inputs[:1]
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        model.training = True
        perm = rng.permutation(len(tr))
        loss_sum, count = 0.0, 0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            model.zero_grad()
            pred = model.forward(tr.inputs[idx])
            loss = ad.mse(pred, tr.targets[idx])
            lv = float(loss.data)
            if not math.isfinite(lv):
                model.training = False
                model.load_state_dict(last_finite)
                log_.diverged = True
                log_.message = f"non-finite training loss at epoch {epoch}"
                log.error(log_.message)
                return _finish(model, tr, log_, best_state if math.isfinite(best_val) else last_finite)
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient for {k} at epoch {epoch}")
            _clip(grads, config.grad_clip)
            adam_step({k: p.data for k, p in model.params.items()}, grads, state, sched.lr, config.beta1,
                      config.beta2, config.eps, config.weight_decay, lr_scale=kscale)
            loss_sum += lv * len(idx)
            count += len(idx)
        model.training = False
        last_finite = model.state_dict()
        val = evaluate_mse(model, monitor)
        rec = EpochRecord(epoch, loss_sum / count, val, sched.lr, _scalar(model.rho), _scalar(model.lam),
                          _bias_share(model, probe), time.perf_counter() - t0)
        if model.is_geo and not np.all(np.asarray(model.rho) > 0):
            raise TrainingError("range parameter left the positive half-line")
        log_.records.append(rec)
        if val < best_val:
            best_val, best_state = val, model.state_dict()
            log_.best_epoch = epoch
        sched.step(val)
        if callback is not None:
            callback(rec)
        log.debug("epoch %d train %.5f val %.5f lr %.2e rho %s", epoch, rec.train_mse, val, rec.lr, rec.rho)
        if config.early_stopping and epoch - log_.best_epoch >= config.early_stopping:
            log_.message = f"early stop after epoch {epoch}"
            break
    return _finish(model, tr, log_, best_state)


def _scalar(v):
    # per-head kernels are logged by their mean
    return None if v is None else float(np.mean(v))


def _finish(model, tr, log_, state):
    model.load_state_dict(state)
    model.training = False
    model.noise_var = evaluate_mse(model, tr)
    return model, log_
