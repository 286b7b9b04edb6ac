"""Neural building blocks: dense stacks, the fire-module image encoder,
the stacked LSTM and the upsampling image decoder."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, default_dtype
from .tensor import ops

ACTIVATIONS = {
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "relu": ops.relu,
    "none": None,
}


class Module:
    """Parameter container with deterministic, assignment-ordered naming."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def add_modules(self, prefix: str, modules: Sequence["Module"]) -> list:
        for i, m in enumerate(modules):
            self._modules[f"{prefix}{i}"] = m
        return list(modules)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class DenseLayer(Module):
    """Affine map, then optional batch norm, then activation."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: str = "none",
        batch_norm: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
        zero_init: bool = False,
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        if zero_init:
            self.weight = Tensor(np.zeros((n_out, n_in), dtype=dtype), requires_grad=True)
        else:
            self.weight = _uniform(rng, (n_out, n_in), n_in, dtype)
        # A bias in front of batch norm is cancelled by the mean subtraction.
        self.bias = None if batch_norm else Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        self.bn = BatchNorm(n_out, dtype=dtype) if batch_norm else None
        self.activation = activation
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.linear(x, self.weight, self.bias)
        if self.bn is not None:
            y = self.bn(y)
        act = ACTIVATIONS[self.activation]
        return act(y) if act else y


class MLP(Module):
    """Stack of dense layers: batch norm + ``hidden`` activation on hidden
    layers, ``output`` activation on the last one.

    ``sizes`` lists every width including the input, e.g. ``[6, 64, 64, 1]``.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        hidden: str = "tanh",
        output: str = "sigmoid",
        output_batch_norm: bool = False,
        zero_output: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        rng = rng or np.random.default_rng(0)
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(
                DenseLayer(
                    a,
                    b,
                    activation=output if last else hidden,
                    batch_norm=output_batch_norm if last else True,
                    rng=rng,
                    dtype=dtype,
                    zero_init=last and zero_output,
                )
            )
        self.layers = self.add_modules("layer", layers)
        self.sizes = list(sizes)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)


def mlp_forward(stack: Sequence[DenseLayer], x: Tensor) -> Tensor:
    for i, layer in enumerate(stack):
        if x.ndim != 2 or x.shape[1] != layer.n_in:
            raise ShapeError(f"mlp layer {i}: expected input width {layer.n_in}, got shape {x.shape}")
        x = layer(x)
    return x


class Conv2d(Module):
    def __init__(self, n_in, n_out, kernel, padding=0, stride=1, bias=True, rng=None, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        self.weight = _uniform(rng, (n_out, n_in, kernel, kernel), n_in * kernel * kernel, dtype)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None
        self.padding = padding
        self.stride = stride
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvBlock(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, n_in, n_out, kernel, padding=0, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(n_in, n_out, kernel, padding=padding, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm(n_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class FireModule(Module):
    """1x1 squeeze feeding parallel 1x1 and 3x3 expand convolutions.

    ``out_channels`` is split evenly between the two expand branches.
    """

    def __init__(self, n_in: int, out_channels: int, squeeze: int = 16, rng=None, dtype=None):
        super().__init__()
        if out_channels % 2:
            raise ValueError(f"fire module output channels must be even, got {out_channels}")
        half = out_channels // 2
        self.squeeze = ConvBlock(n_in, squeeze, 1, rng=rng, dtype=dtype)
        self.expand1 = ConvBlock(squeeze, half, 1, rng=rng, dtype=dtype)
        self.expand3 = ConvBlock(squeeze, half, 3, padding=1, rng=rng, dtype=dtype)
        self.n_in = n_in
        self.out_channels = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return fire_forward(self, x)


def fire_forward(f: FireModule, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != f.n_in:
        raise ShapeError(f"fire module: expected {f.n_in} input channels, got shape {x.shape}")
    s = f.squeeze(x)
    return ops.concat([f.expand1(s), f.expand3(s)], axis=1)


class Identity(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class Projection(Module):
    """Bias-free 1x1 convolution used as a residual shortcut."""

    def __init__(self, n_in, n_out, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(n_in, n_out, 1, bias=False, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


def shortcut(n_in: int, n_out: int, rng=None, dtype=None) -> Module:
    return Identity() if n_in == n_out else Projection(n_in, n_out, rng=rng, dtype=dtype)


def admissible_resolutions(n_fire: int) -> list:
    return [8 * 2**level for level in range(1, n_fire + 2)]


def pooling_levels(resolution: int) -> int:
    level = math.log2(resolution / 8) if resolution >= 8 else -1
    if level < 1 or level != int(level):
        raise ValueError(f"resolution {resolution} is not of the form 8*2^L with L >= 1")
    return int(level)


class ImageEncoder(Module):
    """Stem conv, fire modules with residual shortcuts, valid 8x8 head.

    Each stage is conv -> batch norm -> ReLU followed by 2x2 max pooling until
    the map is 8x8; the head then collapses it to a ``latent``-dim vector.
    """

    def __init__(
        self,
        in_channels: int = 20,
        resolution: int = 128,
        n_fire: Optional[int] = None,
        stem_channels: int = 64,
        fire_channels: Sequence[int] = (64, 128, 256),
        squeeze: int = 16,
        latent: int = 256,
        rng=None,
        dtype=None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        try:
            levels = pooling_levels(resolution)
        except ValueError:
            levels = None
        if n_fire is None:
            n_fire = min(len(fire_channels), levels - 1) if levels else len(fire_channels)
        if levels is None or levels > n_fire + 1 or n_fire > len(fire_channels):
            raise ValueError(
                f"image encoder with {n_fire} fire modules needs resolution in "
                f"{admissible_resolutions(min(n_fire, len(fire_channels)))}, got {resolution}"
            )
        self.stem = ConvBlock(in_channels, stem_channels, 5, padding=2, rng=rng, dtype=dtype)
        fires, cuts = [], []
        ch = stem_channels
        for i in range(n_fire):
            fires.append(FireModule(ch, fire_channels[i], squeeze=squeeze, rng=rng, dtype=dtype))
            cuts.append(shortcut(ch, fire_channels[i], rng=rng, dtype=dtype))
            ch = fire_channels[i]
        self.fires = self.add_modules("fire", fires)
        self.shortcuts = self.add_modules("shortcut", cuts)
        self.head = ConvBlock(ch, latent, 8, rng=rng, dtype=dtype)
        self.levels = levels
        self.in_channels = in_channels
        self.resolution = resolution
        self.latent = latent

    def __call__(self, images: Tensor) -> Tensor:
        return encode_image(self, images)


def encode_image(enc: ImageEncoder, images: Tensor) -> Tensor:
    """Encode a batch [N, C, H, H] (or a single [C, H, H]) into [N, latent]."""
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != enc.in_channels:
        raise ShapeError(f"image encoder: expected [N, {enc.in_channels}, H, H], got {images.shape}")
    if images.shape[2] != enc.resolution or images.shape[3] != enc.resolution:
        raise ShapeError(
            f"image encoder configured for {enc.resolution}x{enc.resolution}, got {images.shape[2]}x{images.shape[3]}"
        )
    pools = enc.levels
    x = ops.max_pool2d(enc.stem(images))
    pools -= 1
    for fire, cut in zip(enc.fires, enc.shortcuts):
        x = ops.add(fire_forward(fire, x), cut(x))
        if pools > 0:
            x = ops.max_pool2d(x)
            pools -= 1
    z = enc.head(x)
    z = z.reshape((z.shape[0], enc.latent))
    return z[0] if single else z


class LSTMCell(Module):
    """Standard LSTM cell; gate rows ordered input, forget, candidate, output."""

    def __init__(self, n_in: int, hidden: int, rng=None, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        self.weight = _uniform(rng, (4 * hidden, n_in + hidden), n_in + hidden, dtype)
        self.bias = Tensor(np.zeros(4 * hidden, dtype=dtype), requires_grad=True)
        self.n_in = n_in
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple:
        gates = ops.linear(ops.concat([x, h], axis=1), self.weight, self.bias)
        n = self.hidden
        i = ops.sigmoid(gates[:, 0:n])
        f = ops.sigmoid(gates[:, n : 2 * n])
        g = ops.tanh(gates[:, 2 * n : 3 * n])
        o = ops.sigmoid(gates[:, 3 * n : 4 * n])
        c = ops.add(ops.mul(f, c), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        return h, c


class LstmStack(Module):
    def __init__(self, n_in: int, hidden: int = 256, layers: int = 2, rng=None, dtype=None):
        super().__init__()
        cells = [LSTMCell(n_in if k == 0 else hidden, hidden, rng=rng, dtype=dtype) for k in range(layers)]
        self.cells = self.add_modules("cell", cells)
        self.hidden = hidden
        self.n_in = n_in

    def __call__(self, sequence: Sequence[Tensor]) -> Tensor:
        return lstm_forward(self, sequence)


def lstm_forward(stack: LstmStack, sequence: Sequence[Tensor]) -> Tensor:
    """Run the stack over ``sequence`` (K tensors of [B, D]); return the top
    layer's hidden state after the last step."""
    if len(sequence) == 0:
        raise ValueError("lstm_forward: empty sequence")
    first = sequence[0]
    if first.ndim == 1:
        sequence = [s.reshape((1, s.shape[0])) for s in sequence]
        first = sequence[0]
    for s in sequence:
        if s.ndim != 2 or s.shape[1] != stack.n_in:
            raise ShapeError(f"lstm_forward: expected steps of width {stack.n_in}, got {s.shape}")
    batch = first.shape[0]
    dtype = stack.cells[0].weight.dtype
    states = [
        (Tensor(np.zeros((batch, stack.hidden), dtype=dtype)), Tensor(np.zeros((batch, stack.hidden), dtype=dtype)))
        for _ in stack.cells
    ]
    top = None
    for x in sequence:
        for k, cell in enumerate(stack.cells):
            h, c = cell(x, *states[k])
            states[k] = (h, c)
            x = h
        top = x
    return top


class ImageDecoder(Module):
    """Latent -> learned 4x4 seed -> (upsample, conv, batch norm, ReLU) stages.

    The number of stages is log2(resolution / 4).
    """

    def __init__(
        self,
        latent: int = 256,
        out_channels: int = 20,
        resolution: int = 128,
        seed_channels: int = 256,
        channels: Sequence[int] = (128, 64, 32, 32),
        rng=None,
        dtype=None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        level = math.log2(resolution / 4) if resolution >= 4 else 0
        if level != int(level) or not 1 <= level <= len(channels) + 1:
            raise ValueError(
                f"decoder with up to {len(channels) + 1} stages cannot produce resolution {resolution}; "
                f"admissible: {[4 * 2**k for k in range(1, len(channels) + 2)]}"
            )
        stages = int(level)
        self.seed = DenseLayer(latent, seed_channels * 16, rng=rng, dtype=dtype)
        widths = [seed_channels] + list(channels[: stages - 1]) + [out_channels]
        blocks = [ConvBlock(a, b, 3, padding=1, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.blocks = self.add_modules("block", blocks)
        self.latent = latent
        self.seed_channels = seed_channels
        self.out_channels = out_channels
        self.resolution = resolution

    def __call__(self, z: Tensor) -> Tensor:
        return decode_image(self, z)


def decode_image(dec: ImageDecoder, z: Tensor) -> Tensor:
    single = z.ndim == 1
    if single:
        z = z.reshape((1, z.shape[0]))
    if z.shape[1] != dec.latent:
        raise ShapeError(f"image decoder: expected latent width {dec.latent}, got {z.shape}")
    x = dec.seed(z).reshape((z.shape[0], dec.seed_channels, 4, 4))
    for block in dec.blocks:
        x = block(ops.upsample2d(x))
    if x.shape[2] != dec.resolution:
        raise ShapeError(f"image decoder produced {x.shape[2]}x{x.shape[3]}, expected {dec.resolution}")
    return x[0] if single else x
