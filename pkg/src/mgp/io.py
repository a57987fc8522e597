"""Binary PPM/PGM images, pixel <-> tensor mapping, and synthetic degradations."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, BadMaxvalError, ContractError, ParseError, ShapeError, TruncatedError
from .tensor import Tensor

_MAGIC = {b"P5": 1, b"P6": 3}
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


@dataclass(frozen=True)
class ImageFile:
    width: int
    height: int
    channels: int
    pixels: bytes  # row-major, RGB interleaved

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ContractError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ShapeError(f"{len(self.pixels)} pixel bytes for a {self.width}x{self.height}x"
                             f"{self.channels} image")


def parse_ppm(buf: bytes) -> ImageFile:
    magic = buf[:2]
    if magic not in _MAGIC:
        raise BadMagicError(f"not a binary PPM/PGM (magic {magic!r})")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise TruncatedError("header truncated")
        if not m.group(1).isdigit():
            raise ParseError(f"bad header field {m.group(1)!r}")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise BadMaxvalError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise ParseError(f"bad image size {width}x{height}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise TruncatedError("missing whitespace after header")
    pos += 1
    channels = _MAGIC[magic]
    need = width * height * channels
    data = buf[pos:]
    if len(data) < need:
        raise TruncatedError(f"pixel data truncated: need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise ParseError(f"{len(data) - need} trailing bytes after pixel data")
    return ImageFile(width, height, channels, bytes(data))


def encode_ppm(img: ImageFile) -> bytes:
    magic = "P6" if img.channels == 3 else "P5"
    return f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels


def read_ppm(path) -> ImageFile:
    return parse_ppm(Path(path).read_bytes())


def write_ppm(img: ImageFile, path):
    Path(path).write_bytes(encode_ppm(img))


def to_tensor(img: ImageFile) -> Tensor:
    """u8 v -> 2v/255 - 1, shaped [1, C, H, W]."""
    arr = np.frombuffer(img.pixels, dtype=np.uint8).reshape(img.height, img.width, img.channels)
    arr = arr.transpose(2, 0, 1)[None].astype(np.float64)
    return Tensor(2.0 * arr / 255.0 - 1.0)


def from_tensor(t) -> ImageFile:
    """Clamp to [-1, 1] and map back to the u8 lattice."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise ShapeError(f"expected [1,1|3,H,W], got {list(arr.shape)}")
    u8 = np.rint(255.0 * (np.clip(arr[0], -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)
    _, h, w = u8.shape
    return ImageFile(w, h, u8.shape[0], u8.transpose(1, 2, 0).tobytes())


def load_image(path) -> Tensor:
    return to_tensor(read_ppm(path))


def save_image(t, path):
    write_ppm(from_tensor(t), path)


def mask_image(mask: Tensor) -> ImageFile:
    """Binary mask as a PGM: 1 -> 255, 0 -> 0."""
    return from_tensor(Tensor(mask.data * 2.0 - 1.0))


# ------------------------------------------------------------ degradations

DEGRADATIONS = ("grayscale", "downsample", "center_crop_mask", "random_crop_mask", "gaussian_noise")


def center_crop_mask(h: int, w: int, size: int) -> Tensor:
    """1 everywhere except a centered size x size box of 0."""
    if size < 0 or size > h or size > w:
        raise ContractError(f"crop box {size}x{size} exceeds image {h}x{w}")
    m = np.ones((1, 1, h, w))
    top, left = (h - size) // 2, (w - size) // 2
    m[:, :, top : top + size, left : left + size] = 0.0
    return Tensor(m)


def random_crop_mask(h: int, w: int, p: float, seed: int) -> Tensor:
    """Drop exactly round(p*h*w) pixels picked by a seeded shuffle."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"drop fraction must be in [0, 1], got {p}")
    n = h * w
    drop = int(round(p * n))
    order = np.random.default_rng(seed).permutation(n)
    m = np.ones(n)
    m[order[:drop]] = 0.0
    return Tensor(m.reshape(1, 1, h, w))


def degrade(img: Tensor, kind: str, *, factor: int = 4, size: int = 16, p: float = 0.8,
            sigma: float = 0.1, seed: int = 0) -> tuple[Tensor, Tensor | None]:
    """Synthesize a task input from a clean [1,3,H,W] image.

    Returns (reference, mask). Mask-based kinds return the image with hidden
    pixels zeroed, plus the mask (1 = known pixel).
    """
    from .objective import down, gray

    if img.data.ndim != 4 or img.shape[:2] != (1, 3):
        raise ShapeError(f"degrade expects [1,3,H,W], got {list(img.shape)}")
    _, _, h, w = img.shape
    if kind == "grayscale":
        return gray(img).detach(), None
    if kind == "downsample":
        return down(img, factor).detach(), None
    if kind in ("center_crop_mask", "random_crop_mask"):
        mask = center_crop_mask(h, w, size) if kind == "center_crop_mask" else random_crop_mask(h, w, p, seed)
        return Tensor(img.data * np.repeat(mask.data, 3, axis=1)), mask
    if kind == "gaussian_noise":
        if sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return img.detach(), None
        noise = np.random.default_rng(seed).standard_normal(img.shape)
        return Tensor(img.data + sigma * noise), None
    raise ContractError(f"unknown degradation {kind!r}; expected one of {', '.join(DEGRADATIONS)}")
