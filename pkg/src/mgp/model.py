"""Frozen generator and perceptual feature extractor, plus the MGC1 checkpoint format.

A generator is a flat list of layers. Split index ``ell`` cuts the list right
before the ``ell+1``-th weighted layer, so the first part ends with the
activation of the ``ell``-th weighted layer.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, ContractError, InconsistentShapeError, ParseError, ShapeError,
                     TruncatedError)
from .tensor import Tensor

KINDS = ("conv_transpose", "conv", "leaky_relu", "tanh", "nearest_upsample")
WEIGHTED = ("conv_transpose", "conv")

DATA_DIR = Path(__file__).resolve().parent / "data"
TOY_GEN_PATH = DATA_DIR / "toy_gen_seed7.mgc"
TOY_PHI_PATH = DATA_DIR / "toy_phi_seed11.mgc"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    weight: Tensor | None = None
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    slope: float = 0.2
    factor: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.weighted:
            if self.weight is None or self.bias is None:
                raise ShapeError(f"{self.kind} layer needs weight and bias")
            w = self.weight.shape
            if len(w) != 4 or w[2] != w[3]:
                raise ShapeError(f"{self.kind} weight must be [a,b,k,k], got {list(w)}")
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(f"{self.kind} bias {list(self.bias.shape)} does not match "
                                 f"{self.out_channels} output channels")
            if self.stride < 1 or self.padding < 0:
                raise ContractError(f"{self.kind}: bad stride {self.stride} / padding {self.padding}")
            self.weight.requires_grad = False
            self.bias.requires_grad = False
        if self.kind == "nearest_upsample" and self.factor < 2:
            raise ContractError(f"nearest_upsample factor must be >= 2, got {self.factor}")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def in_channels(self) -> int:
        w = self.weight.shape
        return w[0] if self.kind == "conv_transpose" else w[1]

    @property
    def out_channels(self) -> int:
        w = self.weight.shape
        return w[1] if self.kind == "conv_transpose" else w[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "conv":
            return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.kind == "conv_transpose":
            return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.kind == "leaky_relu":
            return T.leaky_relu(x, self.slope)
        if self.kind == "tanh":
            return T.tanh(x)
        return T.nearest_upsample(x, self.factor)

    def parameters(self):
        return [self.weight, self.bias] if self.weighted else []


def _check_chain(layers, in_channels):
    c = in_channels
    for i, layer in enumerate(layers):
        if layer.weighted:
            if layer.in_channels != c:
                raise ShapeError(f"layer {i} ({layer.kind}) expects {layer.in_channels} input channels, "
                                 f"previous layer gives {c}")
            c = layer.out_channels
    return c


class SubNetwork:
    """A contiguous slice of a model's layers, applied in order."""

    def __init__(self, layers):
        self.layers = tuple(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Generator:
    def __init__(self, layers, latent_dim: int):
        self.layers = tuple(layers)
        self.latent_dim = int(latent_dim)
        self.weighted_positions = [i for i, l in enumerate(self.layers) if l.weighted]
        if len(self.weighted_positions) < 2:
            raise ContractError("generator needs at least two weighted layers")
        out_c = _check_chain(self.layers, self.latent_dim)
        if out_c != 3:
            raise ShapeError(f"generator must end with 3 output channels, got {out_c}")
        if self.layers[-1].kind != "tanh":
            raise ContractError("generator must end with a tanh layer")
        # candidate split indices 1..num_weighted-1
        self.layer_channel_counts = [self.layers[p].out_channels for p in self.weighted_positions[:-1]]
        self._feature_shapes = {}

    @property
    def num_weighted(self) -> int:
        return len(self.weighted_positions)

    @property
    def num_blocks(self) -> int:
        """Weighted layers that can host a split (all but the to-RGB head)."""
        return self.num_weighted - 1

    def valid_layers(self) -> range:
        return range(1, self.num_weighted)

    def check_latent(self, z: Tensor):
        if z.data.ndim != 4 or z.shape[1:] != (self.latent_dim, 1, 1):
            raise ShapeError(f"latent must have shape [B,{self.latent_dim},1,1], got {list(z.shape)}")

    def forward(self, z: Tensor) -> Tensor:
        self.check_latent(z)
        return SubNetwork(self.layers)(z)

    __call__ = forward

    def split(self, ell: int) -> tuple[SubNetwork, SubNetwork]:
        if ell not in self.valid_layers():
            raise ContractError(f"split layer {ell} out of range; valid range is "
                                f"1..{self.num_weighted - 1}")
        cut = self.weighted_positions[ell]
        return SubNetwork(self.layers[:cut]), SubNetwork(self.layers[cut:])

    def feature_shape(self, ell: int) -> tuple:
        """Shape [1, C, h, w] of the features at split ``ell``."""
        if ell not in self._feature_shapes:
            g1, _ = self.split(ell)
            with T.no_grad():
                f = g1(Tensor(np.zeros((1, self.latent_dim, 1, 1))))
            self._feature_shapes[ell] = f.shape
        return self._feature_shapes[ell]

    def output_shape(self) -> tuple:
        with T.no_grad():
            return self.forward(Tensor(np.zeros((1, self.latent_dim, 1, 1)))).shape

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class PerceptualExtractor:
    def __init__(self, layers):
        self.layers = tuple(layers)
        if not any(l.weighted for l in self.layers):
            raise ContractError("perceptual extractor needs at least one weighted layer")
        self.output_channels = _check_chain(self.layers, 3)

    def __call__(self, image: Tensor) -> Tensor:
        return extract_features(self, image)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def forward(g: Generator, z: Tensor) -> Tensor:
    return g.forward(z)


def split(g: Generator, ell: int):
    return g.split(ell)


def extract_features(phi: PerceptualExtractor, image: Tensor) -> Tensor:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"perceptual extractor expects [B,3,H,W], got {list(image.shape)}")
    return SubNetwork(phi.layers)(image)


# ------------------------------------------------------------- toy models


def _normal(rng, shape, fan_in, gain=1.0):
    return Tensor(rng.standard_normal(shape) * (gain / np.sqrt(fan_in)))


def toy_channels(depth: int, base: int = 64) -> list[int]:
    # constant width: halving channels shrinks the per-code importance vectors at
    # those layers, which makes reconstruction get worse at the split right after
    return [base] * depth


def make_toy_generator(seed: int, depth: int = 8, latent_dim: int = 64, base_channels: int = 64,
                       slope: float = 0.2) -> Generator:
    """Seeded stand-in for a pretrained generator.

    Odd blocks are transposed convolutions (the first lifts 1x1 to 4x4, later
    ones double the resolution), even blocks are 3x3 convolutions; every block
    is followed by a leaky ReLU. A 3x3 convolution and tanh map to RGB. All
    blocks have ``base_channels`` channels.

    Weights are normal draws scaled by 1/sqrt(fan_in), where fan_in counts the
    taps that actually reach one output pixel, times the leaky-ReLU gain
    sqrt(2 / (1 + slope**2)) so activations keep their scale with depth.
    Biases are normal draws scaled by 0.1.
    """
    if depth < 2:
        raise ContractError(f"depth must be >= 2, got {depth}")
    if latent_dim < 1:
        raise ContractError(f"latent_dim must be >= 1, got {latent_dim}")
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    layers = []
    cin = latent_dim
    for i, cout in enumerate(toy_channels(depth, base_channels), start=1):
        if i % 2:
            # a 1x1 input sees one tap per channel; stride 2, k 4 sees four
            stride, padding, fan_in = (1, 0, cin) if i == 1 else (2, 1, cin * 4)
            w = _normal(rng, (cin, cout, 4, 4), fan_in, gain)
            kind = "conv_transpose"
        else:
            stride, padding, fan_in = 1, 1, cin * 9
            w = _normal(rng, (cout, cin, 3, 3), fan_in, gain)
            kind = "conv"
        b = Tensor(rng.standard_normal(cout) * 0.1)
        layers.append(LayerSpec(kind, w, b, stride, padding))
        layers.append(LayerSpec("leaky_relu", slope=slope))
        cin = cout
    w = _normal(rng, (3, cin, 3, 3), cin * 9)
    layers.append(LayerSpec("conv", w, Tensor(rng.standard_normal(3) * 0.1), 1, 1))
    layers.append(LayerSpec("tanh"))
    return Generator(layers, latent_dim)


def make_toy_extractor(seed: int = 11, width: int = 16, slope: float = 0.2) -> PerceptualExtractor:
    """Four convolutions, two of them stride-2; leaky ReLU between, linear output."""
    rng = np.random.default_rng(seed)
    plan = [(3, width, 3, 1, 1), (width, 2 * width, 4, 2, 1),
            (2 * width, 2 * width, 3, 1, 1), (2 * width, 4 * width, 4, 2, 1)]
    layers = []
    for j, (cin, cout, k, s, p) in enumerate(plan):
        fan_in = cin * k * k
        layers.append(LayerSpec("conv", _normal(rng, (cout, cin, k, k), fan_in),
                                _normal(rng, (cout,), fan_in), s, p))
        if j < len(plan) - 1:
            layers.append(LayerSpec("leaky_relu", slope=slope))
    return PerceptualExtractor(layers)


# ------------------------------------------------------------- MGC1 format

MGC_MAGIC = b"MGC1"
MGC_VERSION = 1
_TAGS = {k: i for i, k in enumerate(KINDS)}
_MODEL_KINDS = {0: "generator", 1: "extractor"}


def encode_checkpoint(model) -> bytes:
    if isinstance(model, Generator):
        kind, latent = 0, model.latent_dim
    elif isinstance(model, PerceptualExtractor):
        kind, latent = 1, 0
    else:
        raise ContractError(f"cannot serialize {type(model).__name__}")
    out = [MGC_MAGIC, struct.pack("<IIII", MGC_VERSION, kind, latent, len(model.layers))]
    for layer in model.layers:
        out.append(struct.pack("<B", _TAGS[layer.kind]))
        if layer.weighted:
            out.append(struct.pack("<II", layer.stride, layer.padding))
            out.append(T.encode_mtd(layer.weight))
            out.append(T.encode_mtd(layer.bias))
        elif layer.kind == "leaky_relu":
            out.append(struct.pack("<d", layer.slope))
        elif layer.kind == "nearest_upsample":
            out.append(struct.pack("<I", layer.factor))
    return b"".join(out)


def _unpack(fmt, buf, pos):
    n = struct.calcsize(fmt)
    if len(buf) - pos < n:
        raise TruncatedError(f"checkpoint truncated at byte {pos}")
    return struct.unpack_from(fmt, buf, pos), pos + n


def decode_checkpoint(buf: bytes):
    if len(buf) < 4:
        raise TruncatedError("checkpoint shorter than its magic")
    if buf[:4] != MGC_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    (version, kind, latent, count), pos = _unpack("<IIII", buf, 4)
    if version != MGC_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    if kind not in _MODEL_KINDS:
        raise ParseError(f"unknown model kind {kind}")
    layers = []
    for i in range(count):
        (tag,), pos = _unpack("<B", buf, pos)
        if tag >= len(KINDS):
            raise ParseError(f"layer {i}: unknown kind tag {tag}")
        name = KINDS[tag]
        try:
            if name in WEIGHTED:
                (stride, padding), pos = _unpack("<II", buf, pos)
                w, pos = T.decode_mtd(buf, pos)
                b, pos = T.decode_mtd(buf, pos)
                layers.append(LayerSpec(name, w, b, stride, padding))
            elif name == "leaky_relu":
                (slope,), pos = _unpack("<d", buf, pos)
                layers.append(LayerSpec(name, slope=slope))
            elif name == "nearest_upsample":
                (factor,), pos = _unpack("<I", buf, pos)
                layers.append(LayerSpec(name, factor=factor))
            else:
                layers.append(LayerSpec(name))
        except BadMagicError as e:
            raise ParseError(f"layer {i}: {e}") from e
        except (ShapeError, ContractError) as e:
            raise InconsistentShapeError(f"layer {i}: {e}") from e
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes after last layer")
    try:
        if kind == 0:
            return Generator(layers, latent)
        return PerceptualExtractor(layers)
    except (ShapeError, ContractError) as e:
        raise InconsistentShapeError(str(e)) from e


def save_checkpoint(model, path):
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_digest(model) -> str:
    return hashlib.sha256(encode_checkpoint(model)).hexdigest()


def describe(model, **extra) -> str:
    """Plain-text architecture table (the metadata sidecar content)."""
    lines = []
    for key, value in extra.items():
        lines.append(f"{key}: {value}")
    if isinstance(model, Generator):
        lines += [
            "model: generator",
            f"latent_dim: {model.latent_dim}",
            f"weighted_layers: {model.num_blocks}",
            "head: conv3x3 -> 3 channels, tanh",
            f"channel_counts: {' '.join(map(str, model.layer_channel_counts))}",
            f"output_shape: {' '.join(map(str, model.output_shape()))}",
            "# layer channels height width",
        ]
        for ell in model.valid_layers():
            _, c, h, w = model.feature_shape(ell)
            lines.append(f"{ell} {c} {h} {w}")
    else:
        lines += ["model: extractor", f"output_channels: {model.output_channels}"]
        for i, layer in enumerate(model.layers):
            desc = layer.kind
            if layer.weighted:
                desc += f" {layer.in_channels}->{layer.out_channels} k{layer.weight.shape[-1]} " \
                        f"s{layer.stride} p{layer.padding}"
            lines.append(f"# {i} {desc}")
    lines.append(f"sha256: {checkpoint_digest(model)}")
    return "\n".join(lines) + "\n"


def read_metadata(path) -> dict:
    """Parse a sidecar written by :func:`describe` into a dict.

    The per-layer table lands under ``"feature_shapes"`` as {ell: (C, h, w)}.
    """
    meta, shapes = {}, {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if ":" in line:
            key, value = line.split(":", 1)
            meta[key.strip()] = value.strip()
        else:
            ell, c, h, w = map(int, line.split())
            shapes[ell] = (c, h, w)
    meta["feature_shapes"] = shapes
    return meta


def sidecar_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_suffix(".txt")
