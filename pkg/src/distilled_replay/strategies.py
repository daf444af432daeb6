"""Continual training loop with Naive, Simple Replay, Distilled Replay and Cumulative strategies.

Every SGD step trains on the whole replay buffer concatenated with the
current minibatch. Each experience gets exactly one pass over its data.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import data as data_mod
from .autodiff import Graph, NumericError, grad
from .distillation import DistillConfig, DistilledMemory, distill, init_memory
from .evaluation import AccuracyMatrix
from .models import InitDistribution, ModelSpec, Params, accuracy, init, loss, one_hot
from .scenarios import DEFAULT_BATCH_SIZE, Experience, Stream, iterate_single_pass
from .seeding import derive_seed

log = logging.getLogger(__name__)

STRATEGIES = ("naive", "simple_replay", "distilled_replay", "cumulative")


class TrainingDiverged(NumericError):
    pass


@dataclass
class ReplayBuffer:
    per_class: int = 1
    memories: list[DistilledMemory] = field(default_factory=list)

    def add(self, memory: DistilledMemory) -> None:
        self.memories.append(memory)

    def __len__(self):
        return sum(len(m) for m in self.memories)

    def arrays(self) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        if not self.memories:
            return None, None
        return (
            np.concatenate([m.samples for m in self.memories]),
            np.concatenate([m.labels for m in self.memories]),
        )


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "naive"
    lr: float = 0.1
    batch_size: int = DEFAULT_BATCH_SIZE
    per_class: int = 1
    seed: int = 0
    replay_weight: float = 1.0
    dtype: str = "float64"
    distill: Optional[DistillConfig] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.per_class < 0 or self.replay_weight <= 0:
            raise ValueError(f"invalid train config: {self}")
        if self.strategy == "distilled_replay":
            if self.distill is None:
                raise ValueError("distilled_replay needs a distill config")
            if self.distill.eta != self.lr:
                raise ValueError(
                    f"distillation learning rate {self.distill.eta} must equal the training learning rate {self.lr}"
                )

    @property
    def epochs(self) -> int:
        return 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = self.distill.to_dict() if self.distill else None
        return d


def sgd_step(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray, lr: float,
             n_replay: int = 0, replay_weight: float = 1.0) -> tuple[Params, float]:
    """One plain SGD step on the mean cross-entropy of ``(x, one-hot y)``.

    The first ``n_replay`` rows are buffer samples; ``replay_weight`` rescales
    their share of the mean (1 means an unweighted mean over all rows).
    """
    g = Graph()
    ws = [g.var(t, requires_grad=True) for t in params.tensors]
    if n_replay and replay_weight != 1.0 and n_replay < len(x):
        n_cur = len(x) - n_replay
        l_buf = loss(spec, ws, g.const(x[:n_replay]), g.const(y[:n_replay]))
        l_cur = loss(spec, ws, g.const(x[n_replay:]), g.const(y[n_replay:]))
        total = (l_buf * (replay_weight * n_replay) + l_cur * float(n_cur)) / (replay_weight * n_replay + n_cur)
    else:
        total = loss(spec, ws, g.const(x), g.const(y))
    grads = grad(total, ws)
    new = [t - lr * gr.value for t, gr in zip(params.tensors, grads)]
    g.clear()
    return Params(new, list(params.names)), float(total.value)


def train_experience(
    spec: ModelSpec,
    params: Params,
    train: data_mod.Dataset,
    buffer: Optional[ReplayBuffer],
    cfg: TrainConfig,
    seed: int,
) -> Params:
    """Single pass over ``train``; every step sees the entire buffer plus one minibatch."""
    bx, by = buffer.arrays() if buffer is not None else (None, None)
    dtype = params.tensors[0].dtype
    for q, (x, labels) in enumerate(iterate_single_pass(train, cfg.batch_size, seed), start=1):
        x = np.asarray(x, dtype=dtype)
        y = one_hot(labels, spec.num_classes, dtype)
        n_replay = 0
        if bx is not None:
            n_replay = len(bx)
            x = np.concatenate([bx.astype(dtype).reshape(len(bx), *x.shape[1:]), x])
            y = np.concatenate([by.astype(dtype), y])
        try:
            params, _ = sgd_step(spec, params, x, y, cfg.lr, n_replay, cfg.replay_weight)
        except NumericError as exc:
            raise TrainingDiverged(f"SGD step {q}: {exc}") from exc
    return params


@dataclass
class StreamResult:
    matrix: AccuracyMatrix
    buffer: ReplayBuffer
    params: Params
    timings: list[dict]
    distillations: int
    memories: list[DistilledMemory]


def run_stream(
    stream: Stream,
    spec: ModelSpec,
    cfg: TrainConfig,
    dist: Optional[InitDistribution] = None,
    on_experience: Optional[Callable[[int, AccuracyMatrix], None]] = None,
) -> StreamResult:
    """Train through the stream with ``cfg.strategy``, testing on all seen experiences after each."""
    dist = dist or InitDistribution(dtype=cfg.dtype)
    params = init(spec, derive_seed(cfg.seed, "model-init"), dist)
    buffer = ReplayBuffer(cfg.per_class)
    matrix = AccuracyMatrix(stream.T)
    timings, memories = [], []
    n_distill = 0
    seen: list[Experience] = []
    for exp in stream:
        t = exp.index
        seen.append(exp)
        t0 = time.perf_counter()
        batch_seed = derive_seed(cfg.seed, "batches", t)
        if cfg.strategy == "cumulative":
            union = seen[0].train if len(seen) == 1 else data_mod.concat([e.train for e in seen])
            params = train_experience(spec, params, union, None, cfg, batch_seed)
        else:
            replay = buffer if cfg.strategy in ("simple_replay", "distilled_replay") else None
            params = train_experience(spec, params, exp.train, replay, cfg, batch_seed)
        t_train = time.perf_counter() - t0

        t_distill = 0.0
        if cfg.strategy in ("simple_replay", "distilled_replay") and cfg.per_class > 0:
            mem = init_memory(exp, cfg.per_class, derive_seed(cfg.seed, "init-memory", t), cfg.dtype)
            # the last memory would never be replayed, so it is not distilled
            if cfg.strategy == "distilled_replay" and t < stream.T:
                t1 = time.perf_counter()
                dcfg = cfg.distill
                mem = distill(exp, spec, _with_seed(dcfg, derive_seed(dcfg.seed, cfg.seed)), dist, mem)
                t_distill = time.perf_counter() - t1
                n_distill += 1
            buffer.add(mem)
            memories.append(mem)

        for e in seen:
            matrix.set(t, e.index, accuracy(spec, params, e.test))
        timings.append({"experience": t, "train_seconds": t_train, "distill_seconds": t_distill})
        log.info("experience %d/%d %s A_t=%.4f", t, stream.T, cfg.strategy, matrix.average(t))
        if on_experience is not None:
            on_experience(t, matrix)
    return StreamResult(matrix, buffer, params, timings, n_distill, memories)


def _with_seed(cfg: DistillConfig, seed: int) -> DistillConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return DistillConfig(**d)
