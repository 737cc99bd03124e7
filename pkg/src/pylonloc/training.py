"""Multi-label training loop: BCE loss, Adam, reduce-on-plateau and lr-floor stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_ops as T
from .data import AUGMENT_OPS, ArrayDataset, apply_augmentation, sample_augmentation
from .errors import ConfigurationError, NumericalError
from .models import CAMNet, save_model
from .seeding import SeedStreams, set_seed

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    plateau_factor: float = 0.2
    plateau_patience: int = 1
    plateau_min_delta: float = 1e-4
    stop_lr: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0
    augment: bool = True
    augment_ops: Tuple[str, ...] = AUGMENT_OPS
    eval_batch_size: int = 100

    def validate(self) -> None:
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if not self.stop_lr < self.lr0:
            raise ConfigurationError("stop_lr must be below lr0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.max_epochs < 1 or self.plateau_patience < 0:
            raise ConfigurationError("max_epochs must be >= 1 and plateau_patience >= 0")


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` once validation loss has failed to improve for more than ``patience`` epochs.

    An epoch counts as an improvement when the loss is lower than the best so far
    by more than ``min_delta``. The lr is always ``lr0 * factor**n_reductions``.
    """

    def __init__(self, lr0: float, factor: float = 0.2, patience: int = 1, min_delta: float = 1e-4):
        self.lr0 = lr0
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0
        self.n_reductions = 0

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor**self.n_reductions

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; return True when the lr was reduced."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.n_reductions += 1
            self.bad_epochs = 0
            return True
        return False


def reduce_on_plateau(history: Sequence[float], lr0: float = 1e-4, factor: float = 0.2, patience: int = 1,
                      min_delta: float = 1e-4) -> List[float]:
    """lr in effect after each epoch of ``history``."""
    if not history:
        raise ConfigurationError("reduce_on_plateau needs at least one completed epoch")
    sched = ReduceOnPlateau(lr0, factor, patience, min_delta)
    out = []
    for v in history:
        sched.step(v)
        out.append(sched.lr)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def lrs(self) -> List[float]:
        return [e.lr for e in self.epochs]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr), f"{e.seconds:.3f}"])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        epochs = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]),
                              float(r["seconds"])) for r in rows]
        best = int(np.argmin([e.val_loss for e in epochs])) if epochs else -1
        return cls(epochs, best)


@dataclass
class FitResult:
    model: CAMNet
    log: TrainLog
    best_state: Dict[str, np.ndarray]


def _snapshot(model: CAMNet) -> Dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def evaluate_loss(model: CAMNet, data: ArrayDataset, batch_size: int = 100) -> float:
    """Mean BCE over every (sample, class) entry, eval mode, no augmentation."""
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            xb = data.images[start : start + batch_size]
            yb = data.labels[start : start + batch_size]
            loss = T.bce_with_logits(model(xb).logits, yb)
            total += float(loss.data) * yb.size
            count += yb.size
    return total / count


def predict(model: CAMNet, images: np.ndarray, batch_size: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """(logits, heatmaps) for ``images`` in eval mode."""
    model.eval()
    logits, heats = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start : start + batch_size])
            logits.append(out.logits.data)
            heats.append(out.heatmap.data)
    return np.concatenate(logits), np.concatenate(heats)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton would leave batch norm without statistics
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def fit(model: CAMNet, train_set: ArrayDataset, val_set: ArrayDataset, cfg: TrainConfig,
        out_dir: Optional[Path] = None, streams: Optional[SeedStreams] = None) -> FitResult:
    """Train ``model`` in place and reload the lowest-validation-loss weights at the end.

    When ``out_dir`` is given, ``train_log.csv`` and ``best.ckpt`` are written there.
    """
    cfg.validate()
    if len(train_set) < 1 or len(val_set) < 1:
        raise ConfigurationError("fit needs at least one training and one validation sample")
    if not np.all((train_set.labels == 0) | (train_set.labels == 1)):
        raise ConfigurationError("training labels must be binary")
    streams = streams or set_seed(cfg.seed)
    params = model.parameters()
    opt = T.Adam(params, lr=cfg.lr0)
    sched = ReduceOnPlateau(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta)
    dtype = model.dtype
    images = train_set.images.astype(dtype, copy=False)
    val = val_set.astype(dtype)
    tlog = TrainLog()
    best_loss, best_state = np.inf, _snapshot(model)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = sched.lr
        opt.lr = lr
        model.train()
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(train_set), cfg.batch_size, streams.shuffle)):
            xb = images[idx]
            if cfg.augment:
                xb = np.stack([apply_augmentation(img[0], sample_augmentation(streams.augment, cfg.augment_ops))[None]
                               for img in xb]).astype(dtype)
            yb = train_set.labels[idx]
            opt.zero_grad()
            loss = T.bce_with_logits(model(xb).logits, yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        val_loss = evaluate_loss(model, val, cfg.eval_batch_size)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best_loss, best_state = val_loss, _snapshot(model)
            tlog.best_epoch = epoch
        tlog.epochs.append(EpochRecord(epoch, total / count, val_loss, lr, time.perf_counter() - t0))
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, total / count, val_loss, lr)
        sched.step(val_loss)
        if sched.lr < cfg.stop_lr:
            break
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tlog.to_csv(out / "train_log.csv")
        save_model(model, out / "best.ckpt", extra={"best_epoch": tlog.best_epoch, "val_loss": best_loss})
    return FitResult(model, tlog, best_state)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Across-seed mean and sample standard deviation (0 for a single run)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def format_mean_std(values: Sequence[float], digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f}±{s:.{digits}f}"
