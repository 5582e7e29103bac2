"""
Adam training of ModelParams on streams of labelled instances.

A step evaluates every instance of the batch on its own Graph (optionally on
worker threads), then reduces losses and gradients in instance order, so the
result does not depend on scheduling.
"""
import csv
import io
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tqdm
from pydantic import BaseModel, ConfigDict, Field

from abclust.datasets import CirclesConfig, Instance, LabelledPool, gen_circles, gen_instance
from abclust.model import ArrayRecord, ModelParams, TrainState, abc_forward, bce_loss
from abclust.tensor import Graph, Tensor
from abclust.utils import DataError, NumericalError, write_atomic


class TrainConfig(BaseModel):
    """Optimizer and schedule of a training run"""
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    learning_rate: float = Field(0.001, gt=0)
    batch_size: int = Field(16, ge=1, le=128)
    """Instances per step"""
    steps: int = Field(2000, ge=0)
    """Total number of steps, counted across resumptions"""
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    """Seeds both parameter init and the instance stream"""
    instance_length: int = Field(50, ge=1)
    """Points per training instance"""
    n_circles: int = Field(4, ge=1)
    clip_norm: float | None = Field(None, gt=0)
    """Global gradient norm cap. Off when unset"""
    checkpoint_every: int = Field(0, ge=0)
    """Save a resumable checkpoint every N steps, 0 disables"""
    workers: int = Field(1, ge=1)
    """Threads evaluating the instances of a batch"""


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def zeros(params: ModelParams) -> "AdamState":
        ps = params.parameters()
        return AdamState([np.zeros_like(p.data) for p in ps], [np.zeros_like(p.data) for p in ps])

    def check(self, params: ModelParams):
        for (name, p), m, v in zip(params.named(), self.m, self.v, strict=True):
            if m.shape != p.shape or v.shape != p.shape:
                raise DataError(f"Adam moments of {name!r} do not match its shape {p.shape}")

    def to_train_state(self, params: ModelParams, step: int, trace: list[float]) -> TrainState:
        names = [n for n, _ in params.named()]
        return TrainState(step=step, adam_t=self.t,
                          adam_m={n: ArrayRecord.of(a) for n, a in zip(names, self.m)},
                          adam_v={n: ArrayRecord.of(a) for n, a in zip(names, self.v)},
                          loss_trace=list(trace))

    @staticmethod
    def from_train_state(params: ModelParams, state: TrainState) -> "AdamState":
        names = [n for n, _ in params.named()]
        if set(names) != set(state.adam_m) or set(names) != set(state.adam_v):
            raise DataError("Stored optimizer state does not match the model parameters")
        adam = AdamState([state.adam_m[n].to_array() for n in names],
                         [state.adam_v[n].to_array() for n in names], state.adam_t)
        adam.check(params)
        return adam


def adam_step(params: ModelParams, grads: Sequence[np.ndarray], state: AdamState,
              cfg: TrainConfig, logger: logging.Logger | None = None):
    """Bias-corrected Adam update, applied in place in `params.named()` order"""
    named = list(params.named())
    if len(grads) != len(named):
        raise DataError(f"Got {len(grads)} gradients for {len(named)} parameters")
    bad = [name for (name, _), g in zip(named, grads) if not np.isfinite(g).all()]
    if bad:
        if logger:
            logger.error(f"💥 Rejected step {state.t + 1}: non-finite gradient in {bad}")
        raise NumericalError(f"Non-finite gradient for {bad}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, ((_, p), g) in enumerate(zip(named, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        f = max_norm / norm
        for i, g in enumerate(grads):
            grads[i] = g * f
    return norm


class InstanceStream(ABC):
    """Deterministic source of training batches addressed by step number"""

    @abstractmethod
    def batch(self, step: int, size: int) -> list[Instance]:
        ...


class CirclesStream(InstanceStream):
    def __init__(self, n_points: int, n_circles: int, seed: int):
        self.config = CirclesConfig(n_points=n_points, n_circles=n_circles, seed=seed)
        self.seed = seed

    def batch(self, step: int, size: int) -> list[Instance]:
        return [gen_circles(self.config, np.random.default_rng([self.seed, step, j]), j)
                for j in range(size)]


class PoolStream(InstanceStream):
    def __init__(self, pool: LabelledPool, length: int, seed: int):
        self.pool = pool
        self.length = length
        self.seed = seed

    def batch(self, step: int, size: int) -> list[Instance]:
        return [gen_instance(self.pool, self.length, np.random.default_rng([self.seed, step, j]), j)
                for j in range(size)]


class FixedStream(InstanceStream):
    """Cycles through a fixed list of instances"""

    def __init__(self, instances: Sequence[Instance]):
        if not instances:
            raise DataError("Training stream is empty")
        self.instances = list(instances)

    def batch(self, step: int, size: int) -> list[Instance]:
        start = step * size
        return [self.instances[(start + j) % len(self.instances)] for j in range(size)]


def instance_gradients(params: ModelParams, inst: Instance) -> tuple[float, list[np.ndarray]]:
    with Graph() as graph:
        loss = bce_loss(abc_forward(Tensor(inst.x), params), inst.g)
        grads = graph.gradients(loss, params.parameters())
    return loss.item(), grads


def batch_gradients(params: ModelParams, batch: Sequence[Instance],
                    pool: ThreadPoolExecutor | None = None
                    ) -> tuple[float, list[np.ndarray]]:
    """Mean loss and mean gradient of the batch, reduced in instance order"""
    if not batch:
        raise DataError("Empty batch")
    if pool is not None:
        # workers start from an empty context, carry the caller's tensor flags over
        contexts = [copy_context() for _ in batch]
        results = list(pool.map(lambda ctx, inst: ctx.run(instance_gradients, params, inst),
                                contexts, batch))
    else:
        results = [instance_gradients(params, inst) for inst in batch]
    total = 0.0
    acc = [g.copy() for g in results[0][1]]
    for loss, grads in results[1:]:
        for a, g in zip(acc, grads):
            a += g
    for loss, _ in results:
        total += loss
    b = len(batch)
    return total / b, [a / b for a in acc]


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float]
    adam: AdamState
    step: int
    grad_norms: list[float] = field(default_factory=list)

    def train_state(self) -> TrainState:
        return self.adam.to_train_state(self.params, self.step, self.loss_trace)


def train(params: ModelParams, stream: InstanceStream, cfg: TrainConfig,
          logger: logging.Logger, resume: TrainState | None = None,
          checkpoint: Path | None = None, progress: bool = True) -> TrainResult:
    if resume is not None:
        adam = AdamState.from_train_state(params, resume)
        step = resume.step
        trace = list(resume.loss_trace)
        if len(trace) != step:
            raise DataError(f"Stored loss trace has {len(trace)} entries for step {step}")
        logger.info(f"🔄 Resuming at step {step}/{cfg.steps}")
    else:
        adam = AdamState.zeros(params)
        step = 0
        trace = []
    result = TrainResult(params, trace, adam, step)
    if step >= cfg.steps:
        logger.info("⏩ Nothing to train, step budget already reached")
        return result

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    bar = tqdm.tqdm(total=cfg.steps, initial=step, desc="Training", unit="step",
                    disable=not progress)
    try:
        for s in range(step, cfg.steps):
            loss, grads = batch_gradients(params, stream.batch(s, cfg.batch_size), pool)
            if not np.isfinite(loss):
                raise NumericalError(f"Non-finite loss at step {s}")
            if cfg.clip_norm is not None:
                result.grad_norms.append(clip_global_norm(grads, cfg.clip_norm))
            adam_step(params, grads, adam, cfg, logger)
            trace.append(loss)
            result.step = s + 1
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.debug(f"Step {s}: loss {loss:.6f}")
            if checkpoint is not None and cfg.checkpoint_every and result.step % cfg.checkpoint_every == 0:
                params.save(checkpoint, result.train_state())
                logger.debug(f"Saved checkpoint at step {result.step}")
    finally:
        bar.close()
        if pool is not None:
            pool.shutdown()
    logger.info(f"✅ Trained {result.step} steps, loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return result


def write_loss_trace(path: Path, trace: Sequence[float]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    writer.writerows([i, format(v, ".17g")] for i, v in enumerate(trace))
    write_atomic(path, buf.getvalue())
