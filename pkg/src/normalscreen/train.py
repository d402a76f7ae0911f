"""Adam training loop and scoring."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .archive import save_weights
from .autodiff import EVAL, TRAIN, NonFiniteError, RngState, Tensor
from .dataset import ImagePipeline, Sample, make_batches
from .metrics import ScoredSample
from .model import RANDOM_STEM, Model, calibrate_stem, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 400
    seed: int = 0
    freeze_stem: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        theta -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(theta.dtype)
    return state


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    weights_path: Path | None = None


def train_steps(model: Model, batches, cfg: TrainConfig, state: AdamState,
                rng: RngState) -> float:
    """Run one pass over ``batches``; returns the sample-weighted mean loss."""
    trainable = model.trainable()
    total, count = 0.0, 0
    for x, y in batches:
        ad.zero_grads(model.params.values())
        probs = forward(model, x, TRAIN, rng)
        loss = ad.bce_loss(probs, y)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"training loss became {value} at step {state.t + 1}")
        ad.backward(loss)
        grads = {k: p.grad_or_zeros() for k, p in trainable.items()}
        adam_step({k: p.data for k, p in trainable.items()}, grads, state, cfg)
        total += value * len(y)
        count += len(y)
    return total / count


def train_model(model: Model, samples: Sequence[Sample], pipeline: ImagePipeline,
                cfg: TrainConfig, weights_path=None, calibrate: bool = True) -> TrainResult:
    """Train on ``samples`` (a fold's training set) for ``cfg.epochs`` epochs.

    With a random stem, its feature standardization is first calibrated on
    the un-augmented training images. On divergence raises
    :class:`NonFiniteError` with ``.losses`` holding the log up to the
    failing epoch.
    """
    if not samples:
        raise ValueError("training set is empty")
    if calibrate and model.config.stem == RANDOM_STEM:
        images = np.stack([pipeline.base(s.image_path) for s in samples])[:, None]
        calibrate_stem(model, images)
    if cfg.freeze_stem:
        model.freeze_stem()
    state = AdamState()
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        rng = RngState.derive(cfg.seed, epoch, 2)
        batches = ((b.images, b.labels) for b in
                   make_batches(samples, cfg.batch_size, pipeline, TRAIN, cfg.seed, epoch,
                                model.config.dtype))
        try:
            losses.append(train_steps(model, batches, cfg, state, rng))
        except NonFiniteError as exc:
            exc.losses = losses
            raise
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])
    path = save_weights(model, weights_path) if weights_path is not None else None
    return TrainResult(model, losses, path)


def train_arrays(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                 calibrate: bool = False) -> TrainResult:
    """Train directly on in-memory inputs (images or stem features), no augmentation."""
    if calibrate and model.config.stem == RANDOM_STEM:
        calibrate_stem(model, x)
    if cfg.freeze_stem:
        model.freeze_stem()
    state = AdamState()
    losses = []
    n = len(x)
    dtype = model.config.dtype
    for epoch in range(cfg.epochs):
        order = RngState.derive(cfg.seed, epoch).generator.permutation(n)
        rng = RngState.derive(cfg.seed, epoch, 2)
        batches = ((Tensor(x[order[i:i + cfg.batch_size]].astype(dtype)),
                    y[order[i:i + cfg.batch_size]].reshape(-1, 1).astype(dtype))
                   for i in range(0, n, cfg.batch_size))
        losses.append(train_steps(model, batches, cfg, state, rng))
    return TrainResult(model, losses)


def write_loss_log(path, losses: Sequence[float]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def score_split(model: Model, samples: Sequence[Sample], pipeline: ImagePipeline,
                batch_size: int = 64) -> list[ScoredSample]:
    """Eval-mode probabilities for ``samples``, in input order."""
    out: list[ScoredSample] = []
    if not samples:
        return out
    for batch in make_batches(samples, batch_size, pipeline, EVAL, dtype=model.config.dtype):
        probs = forward(model, batch.images, EVAL).data[:, 0]
        out.extend(ScoredSample(float(p), int(s.label)) for p, s in zip(probs, batch.samples))
    return out
