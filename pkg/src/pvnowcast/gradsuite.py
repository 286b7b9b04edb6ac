"""Finite-difference checks of every op, layer and model kind (float64).

Each check returns a :class:`CheckResult`; ``run_suite`` runs them over many
seeds. Thresholds: 1e-6 for smooth elementwise, matmul, dense and batch-norm
paths, 1e-4 for convolution, pooling, recurrent and whole-model paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .layers import BatchNorm, DenseLayer, FireModule, ImageDecoder, ImageEncoder, LSTMCell, LstmStack
from .models import ModelKind, NowcastModel, batch_loss, Batch, LossWeights, tiny_config
from .tensor import Tensor, check_directions, check_parameters, gradient_check, ops, precision
from .tensor.gradcheck import STEP

TIGHT, LOOSE = 1e-6, 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    threshold: float
    probes: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # a check whose probes all straddled a kink proves nothing
        return bool(self.probes > 0 and np.isfinite(self.error) and self.error < self.threshold)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=np.float64)


def _weights(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _result(name, seed, error, threshold, stats) -> CheckResult:
    return CheckResult(name, seed, error, threshold, stats.get("probes", 0), stats.get("skipped", 0))


def _input_check(name, fn, x, seed, threshold, indices=None) -> CheckResult:
    stats = {}
    return _result(name, seed, gradient_check(fn, x, indices=indices, stats=stats), threshold, stats)


def _param_check(name, loss_fn, params, seed, threshold, probes=6) -> CheckResult:
    stats = {}
    errs = check_parameters(loss_fn, params, probes=probes, rng=np.random.default_rng(seed), stats=stats)
    return _result(name, seed, max(errs.values()) if errs else 0.0, threshold, stats)


def _dot(y: Tensor, w: np.ndarray) -> Tensor:
    """Random linear functional of ``y`` (gives every output element a distinct weight)."""
    return ops.sum(ops.mul(y, Tensor(w.reshape(y.shape))))


def op_checks(seed: int) -> list:
    rng = np.random.default_rng(seed)
    out = []
    a, b = _t(rng, 3, 4), rng.normal(size=(3, 4))
    bt = Tensor(b)
    w = _weights(rng, (3, 4))
    out.append(_input_check("add", lambda x: _dot(ops.add(x, bt), w), a, seed, TIGHT))
    out.append(_input_check("sub", lambda x: _dot(ops.sub(bt, x), w), a, seed, TIGHT))
    out.append(_input_check("mul", lambda x: _dot(ops.mul(x, ops.tanh(x)), w), a, seed, TIGHT))
    out.append(_input_check("tanh", lambda x: _dot(ops.tanh(x), w), a, seed, TIGHT))
    out.append(_input_check("sigmoid", lambda x: _dot(ops.sigmoid(x), w), a, seed, TIGHT))
    out.append(_input_check("relu", lambda x: _dot(ops.relu(x), w), a, seed, TIGHT))
    out.append(_input_check("abs", lambda x: ops.sum(ops.abs(x)), a, seed, TIGHT))
    out.append(_input_check("norm", lambda x: ops.norm(x), a, seed, TIGHT))
    out.append(_input_check("mean", lambda x: ops.mean(ops.mul(x, x)), a, seed, TIGHT))
    m = Tensor(rng.normal(size=(4, 5)))
    w35 = _weights(rng, (3, 5))
    out.append(_input_check("matmul", lambda x: _dot(ops.matmul(x, m), w35), a, seed, TIGHT))
    other = Tensor(rng.normal(size=(3, 2)))
    w36 = _weights(rng, (3, 6))
    out.append(_input_check("concat", lambda x: _dot(ops.concat([x, other], axis=1), w36), a, seed, TIGHT))
    idx = np.array([0, 2, 2, 1])
    w44 = _weights(rng, (4, 4))
    out.append(_input_check("take", lambda x: _dot(ops.take(x, idx), w44), a, seed, TIGHT))
    img = _t(rng, 2, 3, 6, 6)
    for k, pad, stride in ((3, 1, 1), (5, 2, 1), (3, 0, 2), (1, 0, 1)):
        kern = Tensor(rng.normal(size=(4, 3, k, k)))
        size = (6 + 2 * pad - k) // stride + 1
        wc = _weights(rng, (2, 4, size, size))
        out.append(
            _input_check(
                f"conv2d k{k} p{pad} s{stride}",
                lambda x, kern=kern, pad=pad, stride=stride, wc=wc: _dot(ops.conv2d(x, kern, None, stride, pad), wc),
                img,
                seed,
                LOOSE,
            )
        )
    wp = _weights(rng, (2, 3, 3, 3))
    out.append(_input_check("max_pool2d", lambda x: _dot(ops.max_pool2d(x), wp), img, seed, LOOSE))
    wu = _weights(rng, (2, 3, 12, 12))
    out.append(_input_check("upsample2d", lambda x: _dot(ops.upsample2d(x), wu), img, seed, TIGHT))
    return out


def layer_checks(seed: int) -> list:
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        dense = DenseLayer(5, 4, activation="tanh", rng=rng)
        x = _t(rng, 8, 5)
        wd = _weights(rng, (8, 4))
        out.append(_input_check("dense (input)", lambda v: _dot(dense(v), wd), x, seed, TIGHT))
        out.append(_param_check("dense (params)", lambda: _dot(dense(x), wd), list(dense.named_parameters()), seed, TIGHT))

        bn = BatchNorm(4)
        bn.gamma.data = rng.uniform(0.5, 1.5, 4)
        bn.beta.data = rng.normal(size=4)
        xb = _t(rng, 8, 4, scale=2.0)
        wb = _weights(rng, (8, 4))
        out.append(_input_check("batch_norm train (input)", lambda v: _dot(bn(v), wb), xb, seed, TIGHT))
        out.append(_param_check("batch_norm train (params)", lambda: _dot(bn(xb), wb), list(bn.named_parameters()), seed, TIGHT))
        bn2 = BatchNorm(3)
        x4 = _t(rng, 2, 3, 4, 4)
        w4 = _weights(rng, (2, 3, 4, 4))
        out.append(_input_check("batch_norm conv (input)", lambda v: _dot(bn2(v), w4), x4, seed, TIGHT))
        bn2.eval()
        bn2.running_var[...] = rng.uniform(0.5, 2.0, 3)
        out.append(_input_check("batch_norm eval (input)", lambda v: _dot(bn2(v), w4), x4, seed, TIGHT))

        fire = FireModule(1, 8, squeeze=4, rng=rng)
        xf = _t(rng, 2, 1, 8, 8)
        wf = _weights(rng, (2, 8, 8, 8))
        out.append(_input_check("fire module (input)", lambda v: _dot(fire(v), wf), xf, seed, LOOSE))
        out.append(_param_check("fire module (params)", lambda: _dot(fire(xf), wf), list(fire.named_parameters()), seed, LOOSE))

        enc = ImageEncoder(in_channels=2, resolution=16, n_fire=1, stem_channels=4, fire_channels=(6,), squeeze=2, latent=5, rng=rng)
        xe = _t(rng, 3, 2, 16, 16)
        we = _weights(rng, (3, 5))
        out.append(_param_check("image encoder (params)", lambda: _dot(enc(xe), we), list(enc.named_parameters()), seed, LOOSE, probes=3))
        out.append(_input_check("image encoder (input)", lambda v: _dot(enc(v), we), xe, seed, LOOSE, rng.choice(xe.size, 24, replace=False)))

        cell = LSTMCell(4, 3, rng=rng)
        xc, h0, c0 = (Tensor(rng.normal(size=(2, n))) for n in (4, 3, 3))
        wl = _weights(rng, (2, 3))
        out.append(_input_check("lstm cell (input)", lambda v: _dot(ops.add(*cell(v, h0, c0)), wl), _t(rng, 2, 4), seed, LOOSE))
        out.append(_param_check("lstm cell (params)", lambda: _dot(cell(xc, h0, c0)[0], wl), list(cell.named_parameters()), seed, LOOSE))

        stack = LstmStack(4, hidden=3, layers=2, rng=rng)
        seq = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
        out.append(_param_check("lstm stack K=3 (params)", lambda: _dot(stack(seq), wl), list(stack.named_parameters()), seed, LOOSE))
        first = _t(rng, 2, 4)
        out.append(_input_check("lstm stack K=3 (first step)", lambda v: _dot(stack([v] + seq[1:]), wl), first, seed, LOOSE))

        dec = ImageDecoder(latent=5, out_channels=2, resolution=16, seed_channels=4, channels=(3, 3), rng=rng)
        zd = Tensor(rng.normal(size=(3, 5)))
        wdec = _weights(rng, (3, 2, 16, 16))
        out.append(_param_check("image decoder (params)", lambda: _dot(dec(zd), wdec), list(dec.named_parameters()), seed, LOOSE, probes=3))
    return out


def _randomize_for_check(model: NowcastModel, rng) -> None:
    """Give zero-initialized output layers random weights and put batch norm
    in eval mode with random running statistics, so that a 2-sample batch
    exercises every path with non-degenerate gradients."""
    for name, p in model.named_parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, 0.3, p.shape)
    for name, buf in model.named_buffers():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0, 0.1, buf.shape)
        elif name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    model.eval()


def tiny_batch(model: NowcastModel, rng, batch: int = 2) -> Batch:
    cfg = model.cfg
    k, c, h = cfg.history, cfg.in_channels, cfg.resolution
    b = Batch(q_hist=rng.uniform(0.3, 0.9, (batch, k)), dq=rng.uniform(-0.1, 0.1, batch))
    if model.kind.uses_images:
        n = batch * k
        b.images = rng.uniform(0, 1, (n, c, h, h))
        b.image_index = np.arange(n).reshape(batch, k)
        b.image_counts = np.ones(n)
        b.targets = {
            "p": rng.uniform(0, 1, n),
            "theta": rng.uniform(0, 1, (n, 2)),
            "image": rng.uniform(0, 1, (n, c, h, h)),
            "dtheta": rng.uniform(-0.01, 0.01, (batch, 2)),
            "ds": rng.uniform(-0.01, 0.01, batch),
        }
    return b


def model_check(kind, seed: int, directions: int = 2, config=None, step: float = STEP) -> CheckResult:
    rng = np.random.default_rng(seed)
    kind = ModelKind.parse(kind)
    with precision("f64"):
        model = NowcastModel(config or tiny_config(kind), seed=seed)
        _randomize_for_check(model, rng)
        batch = tiny_batch(model, rng)
        weights = LossWeights(dtheta=1.0, ds=1.0, p=1.0, theta=1.0, image=0.01)
        stats = {}
        errs = check_directions(
            lambda: batch_loss(model, batch, weights)[0],
            list(model.named_parameters()),
            step=step,
            directions=directions,
            rng=rng,
            stats=stats,
        )
    return _result(f"model {kind.value}", seed, max(errs.values()), LOOSE, stats)


def run_suite(
    seeds: Iterable[int] = range(20),
    kinds: Sequence = tuple(ModelKind),
    include_layers: bool = True,
    on_result: Optional[Callable[[CheckResult], None]] = None,
) -> list:
    results = []
    for seed in seeds:
        batch = []
        if include_layers:
            batch += op_checks(seed) + layer_checks(seed)
        batch += [model_check(k, seed) for k in kinds]
        for r in batch:
            if on_result:
                on_result(r)
        results += batch
    return results


def summarize(results: Sequence[CheckResult]) -> list:
    """One row per check name: (name, seeds, worst error, threshold, passed, probes, skipped)."""
    rows = {}
    for r in results:
        row = rows.setdefault(r.name, [0, 0.0, r.threshold, True, 0, 0])
        row[0] += 1
        row[1] = max(row[1], r.error) if np.isfinite(r.error) else float("inf")
        row[3] &= r.passed
        row[4] += r.probes
        row[5] += r.skipped
    return [(name, *row) for name, row in rows.items()]
