"""Training loop with per-group Adam and validation-based model selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import state_dict
from .datapipe.samples import SampleSet
from .evaluation import evaluate
from .layers import BatchNorm, Module
from .models import LossWeights, ModelKind, NowcastModel, batch_loss, forward, make_batch
from .tensor import Adam, backward, no_grad

log = logging.getLogger(__name__)

LITERAL_LR_OTHER = 30.0**-4


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    chunk: int = 4
    lr_encoder: float = 1e-3
    lr_other: float = 3e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_batch: int = 64
    # recompute batch-norm statistics over the whole training set after each epoch
    recalibrate_bn: bool = True

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["weights"] = asdict(self.weights)
        return doc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    terms: dict
    val_mae: float
    best_val_mae: float
    seconds: float


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_mae: float
    history: list

    @property
    def best_so_far(self) -> list:
        return [r.best_val_mae for r in self.history]


def sample_chunks(samples: SampleSet, chunk: int) -> list:
    """Group samples into runs of up to ``chunk`` whose t0 values are exactly
    one horizon apart on the same day.

    Consecutive samples of such a run share all but one history image, so a
    batch made of runs needs far fewer distinct images to be encoded.
    """
    step = 60 * samples.horizon
    days = samples.day_ids if samples.day_ids is not None else np.zeros(len(samples), dtype=np.int64)
    order = np.lexsort((samples.t0, (samples.t0 // 60) % samples.horizon, days))
    chunks, current = [], []
    prev = None
    for i in order:
        key = (days[i], samples.t0[i])
        if current and (len(current) == chunk or prev[0] != key[0] or key[1] - prev[1] != step):
            chunks.append(current)
            current = []
        current.append(int(i))
        prev = key
    if current:
        chunks.append(current)
    return chunks


def epoch_batches(samples: SampleSet, cfg: TrainConfig, epoch: int) -> list:
    """Batches for one epoch; the shuffle is seeded by seed XOR epoch."""
    chunks = sample_chunks(samples, max(1, cfg.chunk))
    rng = np.random.default_rng(int(cfg.seed) ^ int(epoch))
    order = rng.permutation(len(chunks))
    per_batch = max(1, cfg.batch_size // max(1, cfg.chunk))
    batches = []
    for start in range(0, len(order), per_batch):
        idx = np.concatenate([chunks[j] for j in order[start : start + per_batch]])
        # batch norm needs more than one row per batch
        if idx.size > 1:
            batches.append(idx)
    return batches


def _batch_norms(module: Module) -> list:
    found = [module] if isinstance(module, BatchNorm) else []
    for child in module._modules.values():
        found += _batch_norms(child)
    return found


def recalibrate_batch_norm(model: NowcastModel, samples: SampleSet, cfg: TrainConfig, channels=None, epoch: int = 0) -> None:
    """Replace running statistics by the plain average of batch statistics
    over one no-grad pass through the training batches.

    The exponential running average follows only the last few batches; with
    chunked, time-correlated batches that makes eval-mode outputs drift.
    """
    norms = _batch_norms(model)
    if not norms:
        return
    saved = [bn.momentum for bn in norms]
    for bn in norms:
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 0.0
    dtype = model.parameters()[0].dtype
    model.train()
    with no_grad():
        for n, idx in enumerate(epoch_batches(samples, cfg, epoch)):
            # momentum n/(n+1) turns the running update into a cumulative mean
            for bn in norms:
                bn.momentum = n / (n + 1)
            batch = make_batch(samples, idx, channels, images=model.kind.uses_images, dtype=dtype)
            forward(model, batch)
    for bn, m in zip(norms, saved):
        bn.momentum = m


def make_optimizer(model: NowcastModel, cfg: TrainConfig) -> Adam:
    opt = Adam()
    if model.kind.uses_images:
        opt.add_group(model.encoder_parameters(), lr=cfg.lr_encoder)
    opt.add_group(model.other_parameters(), lr=cfg.lr_other)
    return opt


def train(
    model: NowcastModel,
    train_set: SampleSet,
    val_set: SampleSet,
    cfg: TrainConfig,
    channels: Optional[Sequence[int]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs and keep the weights with the lowest
    validation MAE (in watts). With zero epochs the initial weights are kept."""
    if len(train_set) < 2:
        raise ValueError("training needs at least two samples")
    opt = make_optimizer(model, cfg)
    dtype = model.parameters()[0].dtype
    images = model.kind is not ModelKind.MLP
    aux = model.kind is ModelKind.LSTM_FULL
    history = []
    best_state, best_epoch, best_mae = None, 0, math.inf
    if cfg.epochs == 0:
        report, _ = evaluate(model, val_set, channels, cfg.eval_batch)
        best_mae = report.classes["all"].mae
        best_state = state_dict(model)
    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()
        model.train()
        losses, terms = [], {}
        for b, idx in enumerate(epoch_batches(train_set, cfg, epoch)):
            batch = make_batch(train_set, idx, channels, images=images, aux=aux, dtype=dtype)
            loss, breakdown = batch_loss(model, batch, cfg.weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            backward(loss)
            for p in opt.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(f"non-finite gradient at epoch {epoch}, batch {b}")
            opt.step()
            losses.append(value)
            for k, v in breakdown.items():
                terms.setdefault(k, []).append(v)
        if cfg.recalibrate_bn:
            recalibrate_batch_norm(model, train_set, cfg, channels, epoch)
        report, _ = evaluate(model, val_set, channels, cfg.eval_batch)
        val_mae = report.classes["all"].mae
        if val_mae < best_mae:
            best_mae, best_epoch, best_state = val_mae, epoch, state_dict(model)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            terms={k: float(np.mean(v)) for k, v in terms.items()},
            val_mae=val_mae,
            best_val_mae=best_mae,
            seconds=time.perf_counter() - t_start,
        )
        history.append(rec)
        log.info("epoch %d loss %.5f val MAE %.2f W (best %.2f) %.1fs", epoch, rec.train_loss, val_mae, best_mae, rec.seconds)
        if on_epoch:
            on_epoch(rec)
    return TrainResult(best_state, best_epoch, best_mae, history)
