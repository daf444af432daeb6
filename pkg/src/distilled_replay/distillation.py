"""Buffer distillation.

A small set of synthetic samples is learned so that a model trained on them
for ``S`` plain SGD steps does well on real data. The outer objective sums the
real-data loss after every inner step (``loss_mode="sum_all_steps"``) and is
averaged over sampled initializations; its gradient with respect to the
samples is taken exactly through the unrolled inner loop.

The original dataset-distillation objective (real loss after the last inner
step only, with a learned inner learning rate) is available as
``loss_mode="last_step_only", lr_mode="learned"`` for ablations.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import serialization
from .autodiff import Graph, NumericError, Var, grad
from .models import InitDistribution, ModelSpec, Params, loss, one_hot
from .scenarios import Experience
from .seeding import derive_seed

log = logging.getLogger(__name__)

LOSS_MODES = ("sum_all_steps", "last_step_only")
LR_MODES = ("fixed", "learned")
ETA_FLOOR = 1e-6


class DistillationDiverged(NumericError):
    def __init__(self, message, outer_step, history):
        super().__init__(message)
        self.outer_step = outer_step
        self.history = list(history)


@dataclass(frozen=True)
class DistillConfig:
    per_class: int = 1
    S: int = 10
    R: int = 40
    eta: float = 0.1
    alpha: float = 0.1
    J: int = 1
    n: int = 64
    loss_mode: str = "sum_all_steps"
    lr_mode: str = "fixed"
    momentum: float = 0.0
    eta_alpha: float = 0.01  # outer step for a learned η; the shared alpha diverges
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        # R = 0 is accepted: it returns the initial memory untouched
        if min(self.S, self.J, self.n, self.per_class) < 1 or self.R < 0:
            raise ValueError(f"distill config needs S, J, n, per_class >= 1 and R >= 0: {self}")
        if self.eta <= 0 or self.alpha <= 0 or self.eta_alpha <= 0:
            raise ValueError("eta, alpha and eta_alpha must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr_mode not in LR_MODES:
            raise ValueError(f"lr_mode must be one of {LR_MODES}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    @property
    def is_distilled_replay(self) -> bool:
        return self.loss_mode == "sum_all_steps" and self.lr_mode == "fixed"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistilledMemory:
    samples: np.ndarray
    labels: np.ndarray  # one-hot, never optimized
    source_experience: int
    config: Optional[DistillConfig] = None
    eta: Optional[float] = None
    history: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def classes(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def copy(self) -> "DistilledMemory":
        return DistilledMemory(
            self.samples.copy(), self.labels.copy(), self.source_experience, self.config, self.eta, list(self.history)
        )


def init_memory(exp: Experience, per_class: int, seed: int, dtype="float64") -> DistilledMemory:
    """Pick ``per_class`` real training examples of every class in the experience."""
    g = np.random.default_rng(seed)
    picks = []
    for c in sorted(exp.classes_present):
        idx = np.flatnonzero(exp.train.labels == c)
        if len(idx) < per_class:
            raise ValueError(f"experience {exp.index}: class {c} has {len(idx)} examples, need {per_class}")
        picks.append(np.sort(g.choice(idx, size=per_class, replace=False)))
    idx = np.concatenate(picks)
    samples = np.array(exp.train.images[idx], dtype=dtype)
    labels = one_hot(exp.train.labels[idx], exp.train.num_classes, dtype)
    return DistilledMemory(samples, labels, exp.index)


def unroll(inner_loss: Callable[[list], Var], theta0: Sequence[Var], S: int, eta) -> list[list[Var]]:
    """S differentiable SGD steps on ``inner_loss``; returns θ_1..θ_S.

    ``eta`` is a float or a scalar Var (learned learning rate).
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    thetas, theta = [], list(theta0)
    for s in range(1, S + 1):
        try:
            grads = grad(inner_loss(theta), theta, create_graph=True)
        except NumericError as exc:
            raise NumericError(f"inner step {s}: {exc}") from exc
        theta = [t - eta * g for t, g in zip(theta, grads)]
        thetas.append(theta)
    return thetas


def inner_unroll(spec: ModelSpec, x_tilde: Var, y_tilde: Var, theta0: Sequence[Var], S: int, eta) -> list[list[Var]]:
    """θ_s = θ_{s-1} - η ∇ℓ(x̃, θ_{s-1}) for s = 1..S, full batch over the buffer."""
    return unroll(lambda theta: loss(spec, theta, x_tilde, y_tilde), theta0, S, eta)


@dataclass
class MetaStep:
    grad_x: np.ndarray
    grad_eta: Optional[float]
    loss: float


def _unroll_one(spec, samples, labels, real_x, real_y, init: Params, cfg: DistillConfig, eta: float):
    graph = Graph()
    xt = graph.var(samples, requires_grad=True)
    yt = graph.const(labels)
    xr = graph.const(real_x)
    yr = graph.const(real_y)
    learned = cfg.lr_mode == "learned"
    eta_v = graph.var(np.asarray(eta, dtype=samples.dtype), requires_grad=True) if learned else eta
    theta0 = [graph.var(t, requires_grad=True) for t in init.tensors]
    thetas = inner_unroll(spec, xt, yt, theta0, cfg.S, eta_v)
    steps = thetas if cfg.loss_mode == "sum_all_steps" else thetas[-1:]
    total = None
    for theta in steps:
        term = loss(spec, theta, xr, yr)
        total = term if total is None else total + term
    wrt = [xt, eta_v] if learned else [xt]
    try:
        grads = grad(total, wrt)
        return grads[0].value, (float(grads[1].value) if learned else None), float(total.value)
    finally:
        graph.clear()


def meta_step(
    spec: ModelSpec,
    samples: np.ndarray,
    labels: np.ndarray,
    real_x: np.ndarray,
    real_y: np.ndarray,
    inits: Sequence[Params],
    cfg: DistillConfig,
    eta: Optional[float] = None,
) -> MetaStep:
    """Meta-loss summed over the sampled initializations and its exact gradient.

    ``real_y`` is one-hot. Each initialization is unrolled on its own graph;
    results are reduced in index order, so threading never changes the sum.
    """
    eta = cfg.eta if eta is None else eta
    args = (spec, samples, labels, real_x, real_y)
    if cfg.workers > 1 and len(inits) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(lambda p: _unroll_one(*args, p, cfg, eta), inits))
    else:
        parts = [_unroll_one(*args, p, cfg, eta) for p in inits]
    gx = parts[0][0]
    ge = parts[0][1]
    total = parts[0][2]
    for gx_j, ge_j, l_j in parts[1:]:
        gx = gx + gx_j
        ge = None if ge is None else ge + ge_j
        total += l_j
    return MetaStep(gx, ge, total)


def distill(
    exp: Experience,
    spec: ModelSpec,
    cfg: DistillConfig,
    dist: Optional[InitDistribution] = None,
    memory: Optional[DistilledMemory] = None,
) -> DistilledMemory:
    """Run ``cfg.R`` outer steps of buffer distillation on one experience."""
    dtype = memory.samples.dtype if memory is not None else np.dtype("float64")
    dist = dist or InitDistribution(dtype=str(dtype))
    if memory is None:
        memory = init_memory(exp, cfg.per_class, derive_seed(cfg.seed, "init-memory", exp.index), str(dtype))
    mem = memory.copy()
    mem.config = cfg
    x = mem.samples.copy()
    velocity = np.zeros_like(x)
    eta = cfg.eta
    g = np.random.default_rng(derive_seed(cfg.seed, "distill", exp.index))
    train = exp.train
    n = min(cfg.n, len(train))
    history = []
    for r in range(1, cfg.R + 1):
        idx = np.sort(g.choice(len(train), size=n, replace=False))
        real_x = np.asarray(train.images[idx], dtype=x.dtype)
        real_y = one_hot(train.labels[idx], train.num_classes, x.dtype)
        inits = [dist.sample(spec, int(s)) for s in g.integers(0, 2**62, size=cfg.J)]
        try:
            step = meta_step(spec, x, mem.labels, real_x, real_y, inits, cfg, eta)
        except NumericError as exc:
            raise DistillationDiverged(f"outer step {r}: {exc}", r, history) from exc
        history.append(step.loss)
        if cfg.momentum:
            velocity = cfg.momentum * velocity + step.grad_x
            x = x - cfg.alpha * velocity
        else:
            x = x - cfg.alpha * step.grad_x
        if step.grad_eta is not None:
            eta = max(eta - cfg.eta_alpha * step.grad_eta, ETA_FLOOR)
        if not np.all(np.isfinite(x)):
            raise DistillationDiverged(f"outer step {r}: distilled samples became non-finite", r, history)
        log.debug("distill exp=%d step=%d meta_loss=%.6f", exp.index, r, step.loss)
    mem.samples = x
    mem.history = history
    mem.eta = eta if cfg.lr_mode == "learned" else None
    return mem


def save_memory(path, memory: DistilledMemory, extra: Optional[dict] = None) -> None:
    meta = {
        "source_experience": memory.source_experience,
        "classes": [int(c) for c in memory.classes],
        "config": memory.config.to_dict() if memory.config else None,
        "eta": memory.eta,
        "history": list(memory.history),
        **(extra or {}),
    }
    serialization.save(path, {"samples": memory.samples, "labels": memory.labels}, meta, str(memory.samples.dtype))


def load_memory(path) -> tuple[DistilledMemory, dict]:
    arrays, meta = serialization.load(path)
    cfg = DistillConfig(**meta["config"]) if meta.get("config") else None
    mem = DistilledMemory(arrays["samples"], arrays["labels"], meta["source_experience"], cfg, meta.get("eta"), meta.get("history", []))
    return mem, meta
