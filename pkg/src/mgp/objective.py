"""Reconstruction objective and the task-specific degradations applied before it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .model import PerceptualExtractor, extract_features
from .tensor import Tensor

TASKS = ("reconstruct", "colorize", "super_resolve", "inpaint", "denoise")
LUMA = np.array([[0.299, 0.587, 0.114]])
_REPLICATE = np.ones((3, 1))


@dataclass
class TaskSpec:
    kind: str
    reference: Tensor
    sr_factor: int = 1
    mask: Tensor | None = None
    pixel_weight: float = 1.0
    perceptual_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ContractError(f"unknown task {self.kind!r}; expected one of {', '.join(TASKS)}")
        ref = self.reference
        if ref.data.ndim != 4 or ref.shape[0] != 1:
            raise ShapeError(f"{self.kind}: reference must be [1,C,H,W], got {list(ref.shape)}")
        want_c = 1 if self.kind == "colorize" else 3
        if ref.shape[1] != want_c:
            raise ShapeError(f"{self.kind}: reference needs {want_c} channels, got {list(ref.shape)}")
        if self.kind == "super_resolve" and self.sr_factor < 1:
            raise ContractError(f"sr_factor must be >= 1, got {self.sr_factor}")
        if self.kind == "inpaint":
            m = self.mask
            if m is None:
                raise ContractError("inpaint needs a mask")
            if m.shape != (1, 1) + ref.shape[2:]:
                raise ShapeError(f"mask {list(m.shape)} does not match reference {list(ref.shape)}")
            if not np.all((m.data == 0.0) | (m.data == 1.0)):
                raise ContractError("mask values must be exactly 0 or 1")
        if self.pixel_weight < 0 or self.perceptual_weight < 0:
            raise ContractError("loss weights must be non-negative")

    def expected_input_shape(self) -> tuple:
        """Shape the candidate image must have for this task."""
        _, _, h, w = self.reference.shape
        if self.kind == "super_resolve":
            return (1, 3, h * self.sr_factor, w * self.sr_factor)
        return (1, 3, h, w)


def gray(image: Tensor) -> Tensor:
    """BT.601 luma: 0.299 R + 0.587 G + 0.114 B."""
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"gray expects [B,3,H,W], got {list(image.shape)}")
    return T.channel_mix(image, LUMA)


def down(image: Tensor, k: int) -> Tensor:
    """k x k average pooling."""
    return T.avg_pool2d(image, k)


def _lift(x: Tensor) -> Tensor:
    return T.channel_mix(x, _REPLICATE) if x.shape[1] == 1 else x


def features(phi: PerceptualExtractor, x: Tensor) -> Tensor:
    """phi on 1- or 3-channel images; grayscale is replicated to RGB first."""
    return extract_features(phi, _lift(x))


def loss_terms(x1: Tensor, x2: Tensor, phi: PerceptualExtractor, wp=1.0, wf=1.0,
               x2_features: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Weighted (pixel, perceptual) terms. Either may be a constant zero when its weight is 0.

    ``x2_features`` skips recomputing phi(x2) when the reference is fixed.
    """
    if x1.shape != x2.shape:
        raise ShapeError(f"loss: shape mismatch {list(x1.shape)} vs {list(x2.shape)}")
    if wp < 0 or wf < 0:
        raise ContractError("loss weights must be non-negative")
    zero = Tensor(np.zeros(1))
    pixel = T.scale(T.l2_norm_sq(T.sub(x1, x2)), wp) if wp else zero
    if wf:
        f2 = x2_features if x2_features is not None else features(phi, x2)
        perceptual = T.scale(T.l1_dist(features(phi, x1), f2), wf)
    else:
        perceptual = zero
    return pixel, perceptual


def loss(x1: Tensor, x2: Tensor, phi: PerceptualExtractor, wp=1.0, wf=1.0) -> Tensor:
    """wp * ||x1 - x2||_2^2 + wf * ||phi(x1) - phi(x2)||_1"""
    pixel, perceptual = loss_terms(x1, x2, phi, wp, wf)
    return T.add(pixel, perceptual)


def _expand_mask(mask: Tensor) -> Tensor:
    return Tensor._wrap(np.repeat(mask.data, 3, axis=1))


def degrade_candidate(spec: TaskSpec, x_inv: Tensor) -> Tensor:
    """Post-process a candidate image so it is comparable with ``spec.reference``."""
    want = spec.expected_input_shape()
    if x_inv.shape != want:
        raise ShapeError(f"{spec.kind}: candidate shape {list(x_inv.shape)} does not match "
                         f"expected {list(want)} (reference {list(spec.reference.shape)}, "
                         f"factor {spec.sr_factor})")
    if spec.kind == "colorize":
        return gray(x_inv)
    if spec.kind == "super_resolve":
        return down(x_inv, spec.sr_factor)
    if spec.kind == "inpaint":
        return T.mul(x_inv, _expand_mask(spec.mask))
    return x_inv


def task_target(spec: TaskSpec) -> Tensor:
    """The reference as compared against; masked for inpainting."""
    if spec.kind == "inpaint":
        return Tensor._wrap(spec.reference.data * _expand_mask(spec.mask).data)
    return spec.reference


class TaskObjective:
    """task_loss with the reference side (and its phi features) computed once."""

    def __init__(self, spec: TaskSpec, phi: PerceptualExtractor):
        self.spec = spec
        self.phi = phi
        self.target = task_target(spec)
        self.target_features = None
        if spec.perceptual_weight:
            with T.no_grad():
                self.target_features = features(phi, self.target)

    def terms(self, x_inv: Tensor) -> tuple[Tensor, Tensor]:
        cand = degrade_candidate(self.spec, x_inv)
        return loss_terms(cand, self.target, self.phi, self.spec.pixel_weight,
                          self.spec.perceptual_weight, self.target_features)

    def __call__(self, x_inv: Tensor) -> Tensor:
        return T.add(*self.terms(x_inv))


def task_loss(spec: TaskSpec, x_inv: Tensor, phi: PerceptualExtractor) -> Tensor:
    return TaskObjective(spec, phi)(x_inv)
