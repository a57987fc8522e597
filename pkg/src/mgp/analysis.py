"""Image-quality metrics, per-code attribution, and N / layer sweeps."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, MgpError, ShapeError
from .inversion import InversionConfig, MultiCodeState, invert, render
from .model import Generator, PerceptualExtractor
from .objective import TaskSpec
from .tensor import Tensor

AXES = ("num_codes", "layer")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); ``math.inf`` when the images are identical."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    if peak <= 0:
        raise ContractError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, window: int = 7, c1: float | None = None, c2: float | None = None,
         peak: float = 2.0) -> float:
    """Mean SSIM over all full uniform windows, averaged over channels.

    Local statistics use population (1/n) moments.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    if a.ndim != 4:
        raise ShapeError(f"ssim expects [B,C,H,W], got {list(a.shape)}")
    h, w = a.shape[2:]
    if window < 1 or window % 2 == 0 or window > min(h, w):
        raise ContractError(f"ssim: window {window} must be odd and <= {min(h, w)}")
    c1 = (0.01 * peak) ** 2 if c1 is None else c1
    c2 = (0.03 * peak) ** 2 if c2 is None else c2
    wa = sliding_window_view(a, (window, window), axis=(2, 3))
    wb = sliding_window_view(b, (window, window), axis=(2, 3))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean(axis=(-2, -1)).mean())


def iou(a, b) -> float:
    """Intersection over union of two binary maps; two empty maps give 1."""
    a, b = _arr(a) != 0, _arr(b) != 0
    if a.shape != b.shape:
        raise ShapeError(f"iou: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ------------------------------------------------------------ attribution


@dataclass
class CodeAttribution:
    index: int
    difference_map: Tensor  # [1,1,H,W], >= 0
    region: np.ndarray  # bool [H,W], difference_map above its own mean
    zeroed: int
    best_label: str | None
    iou: float | None
    ious: dict = field(default_factory=dict)


@dataclass
class AttributionReport:
    threshold: float
    codes: list[CodeAttribution]

    def table(self) -> str:
        lines = [f"threshold {self.threshold}", "code zeroed label iou"]
        for c in self.codes:
            score = "-" if c.iou is None else f"{c.iou:.6f}"
            lines.append(f"{c.index} {c.zeroed} {c.best_label or '-'} {score}")
        return "\n".join(lines) + "\n"


def attribute_codes(g: Generator, state: MultiCodeState, masks, threshold: float = 0.2,
                    magnitude: bool = False) -> AttributionReport:
    """Suppress each code's importances above ``threshold`` and see where the image changes.

    ``masks`` is a sequence of (label, [1,1,H,W] binary tensor). The change
    map of each code is binarized at its own mean and labelled with the mask
    of highest IoU (first in input order on ties).
    """
    if threshold <= 0:
        raise ContractError(f"threshold must be positive, got {threshold}")
    masks = [(label, _arr(m)) for label, m in masks]
    for label, m in masks:
        if not np.all((m == 0) | (m == 1)):
            raise ContractError(f"mask {label!r} is not binary")
    base = render(g, state).data
    out = []
    for n, alpha in enumerate(state.importances):
        values = np.abs(alpha.data) if magnitude else alpha.data
        hit = values > threshold
        probe = state.copy(requires_grad=False)
        probe.importances[n].data[hit] = 0.0
        diff = np.sqrt(np.sum((base - render(g, probe).data) ** 2, axis=1, keepdims=True))
        region = diff[0, 0] > diff.mean()
        scores = {}
        for label, m in masks:
            if m.shape[-2:] != region.shape:
                raise ShapeError(f"mask {label!r} shape {list(m.shape)} does not match image "
                                 f"{list(region.shape)}")
            scores[label] = iou(region, m.reshape(region.shape))
        best = max(scores, key=scores.get) if scores else None  # max keeps the first on ties
        out.append(CodeAttribution(n, Tensor(diff), region, int(hit.sum()), best,
                                   scores[best] if best is not None else None, scores))
    return AttributionReport(threshold, out)


# ------------------------------------------------------------------ sweeps


@dataclass
class SweepRun:
    axis_value: int
    seed: int
    target_id: int
    psnr: float
    final_loss: float


@dataclass
class SweepPoint:
    axis_value: int
    mean_psnr: float
    mean_loss: float
    std: float  # population std of the final loss


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]
    seeds: list[int]
    runs: list[SweepRun]

    def point(self, value) -> SweepPoint:
        return next(p for p in self.points if p.axis_value == value)


_worker_models = None


def _init_worker(g, phi):
    global _worker_models
    _worker_models = (g, phi)


def _run_one(job, models=None):
    g, phi = models or _worker_models
    axis, value, seed, tid, target, config = job
    change = {"num_codes": value} if axis == "num_codes" else {"ell": value}
    cfg = replace(config, seed=seed, **change)
    try:
        res = invert(g, phi, TaskSpec("reconstruct", Tensor(target)), cfg)
    except MgpError as e:
        raise type(e)(f"{e} (target {tid}, {axis} {value}, seed {seed})") from e
    return SweepRun(value, seed, tid, psnr(res.image, target), res.final_loss)


def sweep(g: Generator, phi: PerceptualExtractor, targets, axis: str, values, base_config: InversionConfig,
          seeds=None, workers: int = 1) -> SweepResult:
    """Invert every (target, value, seed) and aggregate PSNR / final loss per value."""
    if axis not in AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    values = sorted(set(int(v) for v in values))
    if not values or not len(targets):
        raise ContractError("sweep needs at least one value and one target")
    if seeds is None:
        seeds = [base_config.seed + r for r in range(base_config.repeats)]
    seeds = list(seeds)
    arrays = [_arr(t) for t in targets]
    jobs = [(axis, v, s, tid, arrays[tid], base_config)
            for v in values for s in seeds for tid in range(len(arrays))]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(g, phi)) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(job, (g, phi)) for job in jobs]
    runs.sort(key=lambda r: (r.axis_value, r.seed, r.target_id))
    points = []
    for v in values:
        group = [r for r in runs if r.axis_value == v]
        losses = np.array([r.final_loss for r in group])
        points.append(SweepPoint(v, float(np.mean([r.psnr for r in group])), float(losses.mean()),
                                 float(losses.std())))
    return SweepResult(axis, points, seeds, runs)


def write_sweep_csv(result: SweepResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "seed", "target_id", "psnr", "final_loss"])
        for r in result.runs:
            w.writerow([r.axis_value, r.seed, r.target_id, repr(r.psnr), repr(r.final_loss)])


# ------------------------------------------------------- synthetic targets


def synthetic_scene(seed: int, size: int = 32) -> Tensor:
    """A piecewise-smooth RGB image in [-1, 1] that the generator did not produce.

    Vertical two-colour gradient background with three flat-coloured ellipses.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    top, bottom = rng.uniform(-0.8, 0.8, 3), rng.uniform(-0.8, 0.8, 3)
    img = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        ry, rx = rng.uniform(0.1, 0.3, 2)
        color = rng.uniform(-0.9, 0.9, 3)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        img = np.where(inside[None], color[:, None, None], img)
    return Tensor(np.clip(img, -1, 1)[None])
