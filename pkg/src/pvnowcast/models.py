"""The four nowcasting networks (MLP, CNN, LSTM, LSTM-Full) and their losses.

Every network ends in a sigmoid unit whose output is mapped to a variation
of normalized log power, dq = 2*sigmoid - 1. The output layer starts at zero
so an untrained model predicts no change.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .datapipe.samples import SampleSet
from .layers import MLP, ImageDecoder, ImageEncoder, LstmStack, Module
from .tensor import Tensor, ops


class ModelKind(str, Enum):
    MLP = "mlp"
    CNN = "cnn"
    LSTM = "lstm"
    LSTM_FULL = "lstm_full"

    @property
    def uses_images(self) -> bool:
        return self is not ModelKind.MLP

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}; expected one of {[k.value for k in cls]}") from None


@dataclass
class ModelConfig:
    kind: str = "lstm"
    history: int = 6
    resolution: int = 32
    in_channels: int = 20
    n_fire: Optional[int] = None
    stem_channels: int = 64
    fire_channels: tuple = (64, 128, 256)
    squeeze: int = 16
    latent: int = 256
    mlp_hidden: tuple = (64, 64)
    power_encoder: tuple = (64, 64, 64)
    predictor_hidden: tuple = (1024, 1024, 1024)
    lstm_hidden: int = 256
    lstm_layers: int = 2
    aux_hidden: int = 256
    decoder_seed: int = 256
    decoder_channels: tuple = (128, 64, 32, 32)

    def to_json(self) -> dict:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items() if k in names}
        return cls(**kw)


def tiny_config(kind="lstm", resolution: int = 16, history: int = 3, in_channels: int = 4) -> ModelConfig:
    """Narrow widths for finite-difference checks."""
    return ModelConfig(
        kind=ModelKind.parse(kind).value,
        history=history,
        resolution=resolution,
        in_channels=in_channels,
        stem_channels=6,
        fire_channels=(8, 12, 16),
        squeeze=4,
        latent=12,
        mlp_hidden=(8, 8),
        power_encoder=(8, 8, 8),
        predictor_hidden=(16, 16, 16),
        lstm_hidden=12,
        aux_hidden=8,
        decoder_seed=8,
        decoder_channels=(6, 6, 6, 6),
    )


@dataclass
class LossWeights:
    dtheta: float = 1e3
    ds: float = 1e-3
    p: float = 0.1
    theta: float = 0.1
    image: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Batch:
    """Model inputs and targets for a set of samples.

    Images are deduplicated: ``images`` holds each distinct minute stack once
    and ``image_index`` [B, K] points into it; ``image_counts`` says how many
    (sample, step) slots reference each distinct stack.
    """

    q_hist: np.ndarray
    dq: np.ndarray
    images: Optional[np.ndarray] = None
    image_index: Optional[np.ndarray] = None
    image_counts: Optional[np.ndarray] = None
    targets: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.q_hist.shape[0])


def make_batch(
    samples: SampleSet,
    index,
    channels: Optional[Sequence[int]] = None,
    images: bool = True,
    aux: bool = False,
    dtype=np.float32,
) -> Batch:
    index = np.asarray(index, dtype=np.int64)
    batch = Batch(q_hist=samples.q_hist[index].astype(dtype), dq=samples.dq[index].astype(dtype))
    if not images:
        return batch
    if samples.frames.size == 0:
        raise ValueError("image model needs samples built with images")
    rows, inverse = np.unique(samples.hist[index], return_inverse=True)
    inverse = inverse.reshape(len(index), -1)
    batch.images = samples.images(rows, channels).astype(dtype)
    batch.image_index = inverse
    batch.image_counts = np.bincount(inverse.reshape(-1), minlength=rows.size).astype(dtype)
    if aux:
        q_u = np.zeros(rows.size, dtype=dtype)
        sun_u = np.zeros((rows.size, 2), dtype=dtype)
        q_u[inverse.reshape(-1)] = samples.q_hist[index].reshape(-1)
        sun_u[inverse.reshape(-1)] = samples.sun_hist[index].reshape(-1, 2)
        batch.targets = {
            "p": q_u,
            "theta": sun_u,
            "image": batch.images,
            "dtheta": samples.dtheta[index].astype(dtype),
            "ds": samples.ds[index].astype(dtype),
        }
    return batch


class AuxHeads(Module):
    """Per-step regressors on z_i, image decoder, and variation predictors on z_I."""

    def __init__(self, cfg: ModelConfig, rng, dtype=None):
        super().__init__()
        h = cfg.aux_hidden
        self.power_regressor = MLP([cfg.latent, h, 1], output="sigmoid", rng=rng, dtype=dtype)
        self.sun_regressor = MLP([cfg.latent, h, 2], output="sigmoid", rng=rng, dtype=dtype)
        self.image_decoder = ImageDecoder(
            cfg.latent, cfg.in_channels, cfg.resolution, cfg.decoder_seed, cfg.decoder_channels, rng=rng, dtype=dtype
        )
        self.sun_variation = MLP([cfg.lstm_hidden, h, 2], output="tanh", rng=rng, dtype=dtype)
        self.sky_variation = MLP([cfg.lstm_hidden, h, 1], output="none", rng=rng, dtype=dtype)


class NowcastModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        super().__init__()
        self.kind = ModelKind.parse(cfg.kind)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        k = cfg.history
        if self.kind is ModelKind.MLP:
            self.net = MLP([k, *cfg.mlp_hidden, 1], zero_output=True, rng=rng, dtype=dtype)
            return
        self.encoder = ImageEncoder(
            cfg.in_channels,
            cfg.resolution,
            cfg.n_fire,
            cfg.stem_channels,
            cfg.fire_channels,
            cfg.squeeze,
            cfg.latent,
            rng=rng,
            dtype=dtype,
        )
        self.power_encoder = MLP([k, *cfg.power_encoder], output="tanh", output_batch_norm=True, rng=rng, dtype=dtype)
        if self.kind is ModelKind.CNN:
            width = k * cfg.latent + cfg.power_encoder[-1]
        else:
            self.temporal = LstmStack(cfg.latent, cfg.lstm_hidden, cfg.lstm_layers, rng=rng, dtype=dtype)
            width = cfg.lstm_hidden + cfg.power_encoder[-1]
        self.predictor = MLP([width, *cfg.predictor_hidden, 1], zero_output=True, rng=rng, dtype=dtype)
        if self.kind is ModelKind.LSTM_FULL:
            # separate stream so the main path matches a plain LSTM built with the same seed
            self.aux = AuxHeads(cfg, np.random.default_rng([seed, 1]), dtype=dtype)

    @property
    def predictor_input_width(self) -> int:
        return self.net.sizes[0] if self.kind is ModelKind.MLP else self.predictor.sizes[0]

    def encoder_parameters(self) -> list:
        return self.encoder.parameters() if self.kind.uses_images else []

    def other_parameters(self) -> list:
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    def __call__(self, batch: Batch) -> dict:
        return forward(self, batch)


def forward(model: NowcastModel, batch: Batch) -> dict:
    """Run the model; returns at least ``sigma`` [B] and ``dq`` [B] tensors."""
    dtype = model.parameters()[0].dtype
    q = Tensor(batch.q_hist.astype(dtype))
    if q.ndim != 2 or q.shape[1] != model.cfg.history:
        raise ValueError(f"history length {q.shape[1] if q.ndim == 2 else q.shape} != configured {model.cfg.history}")
    out = {}
    if model.kind is ModelKind.MLP:
        sigma = model.net(q)
    else:
        if batch.images is None:
            raise ValueError(f"{model.kind.value} model needs image stacks but the batch has none")
        z_u = model.encoder(Tensor(batch.images.astype(dtype)))
        steps = [ops.take(z_u, batch.image_index[:, i]) for i in range(model.cfg.history)]
        z_p = model.power_encoder(q)
        if model.kind is ModelKind.CNN:
            z_img = ops.concat(steps, axis=1)
        else:
            z_img = model.temporal(steps)
        sigma = model.predictor(ops.concat([z_img, z_p], axis=1))
        out["z_unique"] = z_u
        out["z_I"] = z_img
        if model.kind is ModelKind.LSTM_FULL:
            aux = model.aux
            out["p"] = aux.power_regressor(z_u).reshape((z_u.shape[0],))
            out["theta"] = aux.sun_regressor(z_u)
            out["image"] = aux.image_decoder(z_u)
            out["dtheta"] = aux.sun_variation(z_img)
            out["ds"] = aux.sky_variation(z_img).reshape((z_img.shape[0],))
    sigma = sigma.reshape((sigma.shape[0],))
    out["sigma"] = sigma
    out["dq"] = ops.sub(ops.mul(sigma, 2.0), 1.0)
    return out


def build_model(kind, config: Optional[ModelConfig] = None, seed: int = 0, dtype=None) -> NowcastModel:
    kind = ModelKind.parse(kind)
    cfg = config or ModelConfig()
    cfg = ModelConfig.from_json({**cfg.to_json(), "kind": kind.value})
    return NowcastModel(cfg, seed=seed, dtype=dtype)


def predict_variation(model: NowcastModel, batch: Batch) -> np.ndarray:
    """Predicted dq in [-1, 1] for every sample of ``batch`` (no gradient tape)."""
    from .tensor import no_grad

    with no_grad():
        return forward(model, batch)["dq"].numpy().astype(np.float64)


def main_loss(dq_hat, dq) -> Tensor:
    """Batch mean of |dq_hat - dq| (the L2 norm of each scalar residual)."""
    dq_hat = ops.as_tensor(dq_hat)
    target = ops.as_tensor(np.asarray(dq, dtype=dq_hat.dtype).reshape(dq_hat.shape), like=dq_hat)
    return ops.mean(ops.abs(ops.sub(dq_hat, target)))


AUX_TASKS = ("dtheta", "ds", "p", "theta", "image")


def _rowwise_norm(diff: Tensor) -> Tensor:
    if diff.ndim == 1:
        return ops.abs(diff)
    return ops.norm(diff.reshape((diff.shape[0], -1)), axis=1)


def multitask_loss(outputs: dict, targets: dict, weights: LossWeights, batch_size: Optional[int] = None, counts=None):
    """Weighted sum of the main and auxiliary losses.

    Per-step terms (p, theta, image) are summed over history steps and
    averaged over samples. When per-step outputs are computed once per
    distinct image, ``counts`` gives how many (sample, step) slots each row
    stands for. Returns (total tensor, dict of unweighted term values).
    """
    if "dq" not in outputs or "dq" not in targets:
        raise KeyError("multitask_loss: missing main task 'dq'")
    main = main_loss(outputs["dq"], targets["dq"])
    b = batch_size or outputs["dq"].shape[0]
    terms = {"dp": main}
    for task in AUX_TASKS:
        if task not in outputs:
            raise KeyError(f"multitask_loss: missing output for task '{task}'")
        if task not in targets:
            raise KeyError(f"multitask_loss: missing target for task '{task}'")
        pred = outputs[task]
        tgt = ops.as_tensor(np.asarray(targets[task], dtype=pred.dtype).reshape(pred.shape), like=pred)
        per_row = _rowwise_norm(ops.sub(pred, tgt))
        if task in ("p", "theta", "image"):
            w = np.ones(per_row.shape[0]) if counts is None else np.asarray(counts)
            per_row = ops.mul(per_row, Tensor(w.astype(per_row.dtype)))
            terms[task] = ops.mul(ops.sum(per_row), 1.0 / b)
        else:
            terms[task] = ops.mean(per_row)
    total = main
    for task in AUX_TASKS:
        total = ops.add(total, ops.mul(terms[task], float(getattr(weights, task))))
    breakdown = {k: float(v.item()) for k, v in terms.items()}
    return total, breakdown


def batch_loss(model: NowcastModel, batch: Batch, weights: Optional[LossWeights] = None):
    """Forward pass plus the loss appropriate for the model kind."""
    out = forward(model, batch)
    if model.kind is ModelKind.LSTM_FULL:
        targets = {"dq": batch.dq, **batch.targets}
        return multitask_loss(out, targets, weights or LossWeights(), batch.size, batch.image_counts)
    loss = main_loss(out["dq"], batch.dq)
    return loss, {"dp": float(loss.item())}
