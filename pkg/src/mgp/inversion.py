"""Multi-code inversion: compose several latent codes at an intermediate layer and
optimize codes and per-channel importances jointly with Adam.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .model import Generator, PerceptualExtractor
from .objective import TaskObjective, TaskSpec
from .tensor import Tensor

log = logging.getLogger(__name__)

# best composition layer per task on the toy generator's 8 candidate layers
TASK_LAYERS = {"reconstruct": 6, "denoise": 6, "super_resolve": 6, "colorize": 8, "inpaint": 4}


@dataclass
class MultiCodeState:
    codes: list[Tensor]
    importances: list[Tensor]
    ell: int

    def __post_init__(self):
        if not self.codes:
            raise ContractError("state needs at least one code")
        if len(self.codes) != len(self.importances):
            raise ShapeError(f"{len(self.codes)} codes but {len(self.importances)} importance vectors")
        shape = self.codes[0].shape
        if any(z.shape != shape for z in self.codes):
            raise ShapeError("all codes must share one shape")
        c = self.importances[0].shape
        if len(c) != 1 or any(a.shape != c for a in self.importances):
            raise ShapeError("importance vectors must be 1-d and share one length")

    @property
    def num_codes(self) -> int:
        return len(self.codes)

    @property
    def latent_dim(self) -> int:
        return self.codes[0].shape[1]

    @property
    def channels(self) -> int:
        return self.importances[0].shape[0]

    def parameters(self) -> list[Tensor]:
        return [*self.codes, *self.importances]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self, requires_grad: bool | None = None) -> "MultiCodeState":
        def dup(t):
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data, requires_grad=rg)

        return MultiCodeState([dup(z) for z in self.codes], [dup(a) for a in self.importances], self.ell)

    def check(self, g: Generator):
        for z in self.codes:
            g.check_latent(z)
        c = g.feature_shape(self.ell)[1]
        if self.channels != c:
            raise ShapeError(f"importances have {self.channels} entries but layer {self.ell} "
                             f"has {c} channels")


@dataclass
class InversionConfig:
    num_codes: int = 20
    ell: int = 6
    steps: int = 1000
    learning_rate: float = 0.01
    seed: int = 0
    init_policy: str = "random_normal"
    init_codes: list | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    wp: float = 1.0
    wf: float = 1.0
    log_every: int = 1
    repeats: int = 1

    def __post_init__(self):
        if self.num_codes < 1:
            raise ContractError(f"num_codes must be >= 1, got {self.num_codes}")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.init_policy not in ("random_normal", "from_codes"):
            raise ContractError(f"unknown init_policy {self.init_policy!r}")
        if self.init_policy == "from_codes" and (self.init_codes is None
                                                 or len(self.init_codes) != self.num_codes):
            raise ContractError("from_codes needs exactly num_codes initial codes")
        if self.log_every < 1 or self.repeats < 1:
            raise ContractError("log_every and repeats must be >= 1")


@dataclass
class TraceRow:
    step: int
    pixel: float
    perceptual: float
    total: float


@dataclass
class InversionResult:
    final_state: MultiCodeState
    image: Tensor
    loss_trace: list[TraceRow] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1].total


def compose(g: Generator, state: MultiCodeState) -> Tensor:
    """G2( sum_n G1(z_n) * alpha_n ), summed in code order."""
    state.check(g)
    g1, g2 = g.split(state.ell)
    total = None
    for z, alpha in zip(state.codes, state.importances):
        part = T.channel_scale(g1(z), alpha)
        total = part if total is None else T.add(total, part)
    return g2(total)


def init_state(config: InversionConfig, g: Generator) -> MultiCodeState:
    """Standard-normal codes from the config seed (or given codes); importances 1/N."""
    n = config.num_codes
    c = g.feature_shape(config.ell)[1]
    shape = (1, g.latent_dim, 1, 1)
    if config.init_policy == "from_codes":
        codes = []
        for z in config.init_codes:
            arr = np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"initial code shape {list(arr.shape)} != {list(shape)}")
            codes.append(Tensor(arr, requires_grad=True))
    else:
        rng = np.random.default_rng(config.seed)
        codes = [Tensor(rng.standard_normal(shape), requires_grad=True) for _ in range(n)]
    alphas = [Tensor(np.full(c, 1.0 / n), requires_grad=True) for _ in range(n)]
    return MultiCodeState(codes, alphas, config.ell)


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _norms(state: MultiCodeState) -> str:
    zs = ", ".join(f"{np.linalg.norm(z.data):.4g}" for z in state.codes)
    als = ", ".join(f"{np.linalg.norm(a.data):.4g}" for a in state.importances)
    return f"|z| = [{zs}], |alpha| = [{als}]"


def invert(g: Generator, phi: PerceptualExtractor, spec: TaskSpec, config: InversionConfig,
           callback=None) -> InversionResult:
    """Run ``config.steps`` Adam steps on all codes and importances jointly.

    The trace holds the loss before each update (every ``log_every`` steps) and
    a final row for the returned state, labelled ``config.steps``.
    """
    start = time.perf_counter()
    spec = replace(spec, pixel_weight=config.wp, perceptual_weight=config.wf)
    want = spec.expected_input_shape()
    if g.output_shape() != want:
        raise ShapeError(f"{spec.kind}: generator output {list(g.output_shape())} does not match "
                         f"the shape the reference implies {list(want)} "
                         f"(reference {list(spec.reference.shape)}, factor {spec.sr_factor})")
    objective = TaskObjective(spec, phi)
    state = init_state(config, g)
    opt = Adam(state.parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    trace = []
    graph = T.Graph()
    with graph:
        for step in range(config.steps):
            pixel, perceptual = objective.terms(compose(g, state))
            total = T.add(pixel, perceptual)
            value = total.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}: {_norms(state)}")
            if step % config.log_every == 0:
                trace.append(TraceRow(step, pixel.item(), perceptual.item(), value))
                log.debug("step %d loss %.6g", step, value)
            opt.zero_grad()
            T.backward(total)
            graph.reset()
            opt.step()
            if callback is not None:
                callback(step, value)
    with T.no_grad():
        image = compose(g, state)
        pixel, perceptual = objective.terms(image)
    total = pixel.item() + perceptual.item()
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss at step {config.steps}: {_norms(state)}")
    trace.append(TraceRow(config.steps, pixel.item(), perceptual.item(), total))
    return InversionResult(state, image, trace, time.perf_counter() - start)


def render(g: Generator, state: MultiCodeState) -> Tensor:
    with T.no_grad():
        return compose(g, state)


def manipulate(state: MultiCodeState, direction: Tensor, magnitude: float) -> MultiCodeState:
    """Shift every code by ``magnitude * direction``; importances are copied unchanged."""
    if direction.shape != state.codes[0].shape:
        raise ShapeError(f"direction shape {list(direction.shape)} does not match codes "
                         f"{list(state.codes[0].shape)}")
    out = state.copy(requires_grad=False)
    if magnitude:
        for z in out.codes:
            z.data += magnitude * direction.data
    return out


# ---------------------------------------------------------------- files


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "pixel", "perceptual", "total"])
        for row in trace:
            w.writerow([row.step, repr(row.pixel), repr(row.perceptual), repr(row.total)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TraceRow(int(r["step"]), float(r["pixel"]), float(r["perceptual"]), float(r["total"]))
            for r in rows]


def save_state(state: MultiCodeState, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(state.num_codes - 1)))
    for n, (z, a) in enumerate(zip(state.codes, state.importances)):
        T.save_tensor(z, d / f"code_{n:0{width}d}.mtd")
        T.save_tensor(a, d / f"alpha_{n:0{width}d}.mtd")
    (d / "layer.txt").write_text(f"{state.ell}\n")


def load_state(directory) -> MultiCodeState:
    d = Path(directory)
    codes = [T.load_tensor(p) for p in sorted(d.glob("code_*.mtd"))]
    alphas = [T.load_tensor(p) for p in sorted(d.glob("alpha_*.mtd"))]
    ell = int((d / "layer.txt").read_text().strip())
    return MultiCodeState(codes, alphas, ell)
