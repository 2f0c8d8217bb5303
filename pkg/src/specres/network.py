"""Multi-scale encoder-decoder mapping RGB images to 31-band spectra.

Encoder step ``s`` is a DoubleConv producing ``base * 2**s`` features
followed by 2x2 max pooling; a DoubleConv bottleneck doubles once more.
Each decoder step expands channels with a 1x1 conv, pixel-shuffles by 2
(so the feature count halves relative to the deeper level), concatenates
the matching encoder features and applies a DoubleConv.  A 1x1 conv maps
the last decoder features to the output bands.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import (
    DEFAULT_DTYPE,
    BatchNormState,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    dropout2d,
    leaky_relu,
    maxpool2,
    pixel_shuffle,
)

WEIGHT_MAGIC = b"SSRW"
WEIGHT_VERSION = 1
WEIGHT_HEADER = struct.Struct("<4sHQ")


@dataclass(frozen=True)
class NetworkConfig:
    scales: int = 4
    base_features: int = 64
    in_channels: int = 3
    out_channels: int = 31
    dropout_rate: float = 0.2
    lrelu_slope: float = 0.2

    def validate(self) -> None:
        if self.scales < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")
        if self.base_features < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("feature and channel counts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.lrelu_slope < 0:
            raise ConfigError(f"lrelu_slope must be non-negative, got {self.lrelu_slope}")

    def fingerprint(self) -> int:
        """Stable 64-bit hash of every config field."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** self.scales


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, dtype=DEFAULT_DTYPE):
        self.name = name
        self.k = k
        self.cin, self.cout = cin, cout
        self.weight = Tensor(np.zeros((cout, cin, k, k), dtype=dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    @property
    def fan_in(self) -> int:
        return self.cin * self.k * self.k

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.k // 2)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, name: str, channels: int, dtype=DEFAULT_DTYPE):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.state = BatchNormState(channels)
        self.state.running_mean = self.state.running_mean.astype(dtype)
        self.state.running_var = self.state.running_var.astype(dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, training)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class DoubleConv:
    """Two rounds of conv3x3 -> batch norm -> leaky ReLU -> channel dropout."""

    def __init__(self, name: str, cin: int, cout: int, cfg: NetworkConfig, dtype=DEFAULT_DTYPE):
        self.name = name
        self.cout = cout
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", cout, dtype)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", cout, dtype)
        self.rate = cfg.dropout_rate
        self.slope = cfg.lrelu_slope

    def __call__(self, x: Tensor, training: bool, rng, masks=None) -> Tensor:
        for i, (conv, bn) in enumerate(((self.conv1, self.bn1), (self.conv2, self.bn2))):
            x = leaky_relu(bn(conv(x), training), self.slope)
            mask = masks.get(f"{self.name}.drop{i + 1}") if masks else None
            x = dropout2d(x, self.rate, training, rng, mask=mask)
        return x

    def layers(self) -> list:
        return [self.conv1, self.bn1, self.conv2, self.bn2]


class Network:
    """The encoder-decoder; build it with :func:`build_network`."""

    def __init__(self, config: NetworkConfig, dtype=DEFAULT_DTYPE):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.rng = np.random.default_rng(0)
        base, n = config.base_features, config.scales

        self.encoder: list[DoubleConv] = []
        cin = config.in_channels
        for s in range(n):
            self.encoder.append(DoubleConv(f"enc{s}", cin, base * 2**s, config, dtype))
            cin = base * 2**s
        self.bottleneck = DoubleConv("bottleneck", cin, base * 2**n, config, dtype)

        self.expand: list[Conv] = []
        self.decoder: list[DoubleConv] = []
        for s in reversed(range(n)):
            deeper = base * 2 ** (s + 1)
            self.expand.append(Conv(f"up{s}.expand", deeper, 2 * deeper, 1, dtype))
            self.decoder.append(DoubleConv(f"dec{s}", deeper, base * 2**s, config, dtype))
        self.head = Conv("head", base, config.out_channels, 1, dtype)

    # -- introspection ----------------------------------------------------

    def layers(self) -> list:
        """All parameterized layers in canonical (file) order."""
        out: list = []
        for blk in self.encoder:
            out += blk.layers()
        out += self.bottleneck.layers()
        for up, blk in zip(self.expand, self.decoder):
            out.append(up)
            out += blk.layers()
        out.append(self.head)
        return out

    def convs(self) -> list[Conv]:
        return [l for l in self.layers() if isinstance(l, Conv)]

    def batchnorms(self) -> list[BatchNorm]:
        return [l for l in self.layers() if isinstance(l, BatchNorm)]

    def parameters(self) -> list[Tensor]:
        return [p for l in self.layers() for p in l.params()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, training: bool | None = None, masks: dict | None = None) -> Tensor:
        """Run the network on a (B, 3, H, W) batch.

        ``masks`` maps dropout sites (``"enc0.drop1"`` etc.) to fixed masks.
        """
        if training is None:
            training = self.training
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W) input, got {x.shape}")
        m = self.config.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(
                f"spatial extents {x.shape[2]}x{x.shape[3]} not divisible by {m}; pad the input (see predict_image)"
            )
        skips = []
        for blk in self.encoder:
            x = blk(x, training, self.rng, masks)
            skips.append(x)
            x = maxpool2(x)
        x = self.bottleneck(x, training, self.rng, masks)
        for up, blk, skip in zip(self.expand, self.decoder, reversed(skips)):
            x = pixel_shuffle(up(x), 2)
            x = blk(concat_channels(x, skip), training, self.rng, masks)
        return self.head(x)

    __call__ = forward

    def dropout_sites(self) -> list[tuple[str, int]]:
        """(site name, channel count) for every dropout layer, in forward order."""
        blocks = [*self.encoder, self.bottleneck, *self.decoder]
        return [(f"{b.name}.drop{i}", b.cout) for b in blocks for i in (1, 2)]


def build_network(config: NetworkConfig, dtype=DEFAULT_DTYPE) -> Network:
    return Network(config, dtype)


def he_normal_(conv: Conv, rng: np.random.Generator) -> Conv:
    """Redraw ``conv.weight`` from N(0, 2 / fan_in) with fan_in = k*k*Cin; zero the bias."""
    std = np.sqrt(2.0 / conv.fan_in)
    conv.weight.data = rng.normal(0.0, std, conv.weight.shape).astype(conv.weight.dtype)
    conv.bias.data = np.zeros_like(conv.bias.data)
    return conv


def init_he_normal(net: Network, rng: np.random.Generator | int) -> Network:
    """He-normal conv weights, zero biases, unit batch-norm scale and zero shift."""
    rng = np.random.default_rng(rng)
    for layer in net.layers():
        if isinstance(layer, Conv):
            he_normal_(layer, rng)
        else:
            layer.gamma.data = np.ones_like(layer.gamma.data)
            layer.beta.data = np.zeros_like(layer.beta.data)
    return net


def num_parameters(net: Network) -> int:
    return sum(p.size for p in net.parameters())


def _tensors_in_file_order(net: Network) -> list[np.ndarray]:
    out = []
    for layer in net.layers():
        if isinstance(layer, Conv):
            out += [layer.weight.data, layer.bias.data]
        else:
            out += [layer.gamma.data, layer.beta.data, layer.state.running_mean, layer.state.running_var]
    return out


def weight_file_size(net: Network) -> int:
    return WEIGHT_HEADER.size + 4 * sum(a.size for a in _tensors_in_file_order(net))


def save_weights(net: Network, path: str | Path) -> None:
    """Write parameters and batch-norm running stats as little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(WEIGHT_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, net.config.fingerprint()))
        for arr in _tensors_in_file_order(net):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weight_header(path: str | Path) -> tuple[int, int]:
    """Return (version, fingerprint) of a weight file."""
    with open(path, "rb") as fh:
        head = fh.read(WEIGHT_HEADER.size)
    if len(head) < WEIGHT_HEADER.size:
        raise DataFormatError(f"{path}: truncated weight header")
    magic, version, fp = WEIGHT_HEADER.unpack(head)
    if magic != WEIGHT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    return version, fp


def load_weights(net: Network, path: str | Path) -> Network:
    version, fp = read_weight_header(path)
    if version != WEIGHT_VERSION:
        raise DataFormatError(f"{path}: unsupported weight file version {version}")
    if fp != net.config.fingerprint():
        raise DataFormatError(f"{path}: fingerprint {fp:#018x} does not match network {net.config.fingerprint():#018x}")
    raw = Path(path).read_bytes()[WEIGHT_HEADER.size:]
    expected = weight_file_size(net) - WEIGHT_HEADER.size
    if len(raw) != expected:
        raise DataFormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4")
    pos = 0

    def take(like: np.ndarray) -> np.ndarray:
        nonlocal pos
        chunk = flat[pos:pos + like.size].reshape(like.shape).astype(net.dtype)
        pos += like.size
        return chunk

    for layer in net.layers():
        if isinstance(layer, Conv):
            layer.weight.data = take(layer.weight.data)
            layer.bias.data = take(layer.bias.data)
        else:
            layer.gamma.data = take(layer.gamma.data)
            layer.beta.data = take(layer.beta.data)
            layer.state.running_mean = take(layer.state.running_mean)
            layer.state.running_var = take(layer.state.running_var)
            layer.state.initialized = True
    return net


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the trailing two axes up to the next multiple; returns (padded, original HxW)."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode=mode), (h, w)


def predict_image(net: Network, rgb: np.ndarray) -> np.ndarray:
    """Eval-mode forward of one (3, H, W) image of any size; returns (31, H, W).

    Extents not divisible by ``2**scales`` are reflect-padded and the output
    cropped back.
    """
    x, (h, w) = pad_to_multiple(np.asarray(rgb, dtype=net.dtype), net.config.multiple)
    out = net.forward(Tensor(x[None]), training=False)
    return out.data[0, :, :h, :w]
