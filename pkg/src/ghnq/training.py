"""Hypernetwork finetuning over a sampled architecture space.

Every optimizer step draws a meta-batch of architectures and one image
batch, predicts each architecture's parameters, runs the float forward,
and averages the cross-entropy losses. Gradients flow through the
predicted parameters into the hypernetwork only; the Adam update uses
decoupled weight decay on everything except the embedding table. The
learning rate is multiplied by ``lr_drop_factor`` from ``lr_drop_epoch``
(1-based) on.

All draws are deterministic functions of (seed, epoch), so a run resumed
from an epoch-boundary checkpoint continues bit-identically.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from . import nn
from .data import Dataset
from .errors import GhnqError, TrainingDivergedError
from .forward import float_forward
from .graphs import (SpaceConfig, canonical_hash, compute_virtual_edges,
                     sample_architecture)
from .hypernet import Hypernet, predict
from .tensor import Tensor, backward


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    lr_drop_epoch: int = 75
    lr_drop_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    batch_size: int = 32
    meta_batch_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        positives = dict(epochs=self.epochs,
                         lr_drop_epoch=self.lr_drop_epoch,
                         lr_drop_factor=self.lr_drop_factor, beta1=self.beta1,
                         beta2=self.beta2, batch_size=self.batch_size,
                         meta_batch_size=self.meta_batch_size)
        for name, value in positives.items():
            if value <= 0:
                raise GhnqError(f"TrainConfig.{name} must be positive, got {value}")
        if self.lr < 0 or self.weight_decay < 0:
            raise GhnqError("lr and weight_decay must be non-negative")
        if self.lr_drop_epoch >= self.epochs:
            raise GhnqError(
                f"lr_drop_epoch ({self.lr_drop_epoch}) must be below epochs "
                f"({self.epochs})")
        if self.seed < 0:
            raise GhnqError("seed must be non-negative")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch index."""
    return cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)


def make_optimizer(h: Hypernet, cfg: TrainConfig) -> nn.Adam:
    """Adam with decoupled weight decay everywhere except the embeddings."""
    params = h.params()
    decay = [t for name, t in params.items() if name != "emb"]
    no_decay = [params["emb"]]
    return nn.Adam(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)


def steps_per_epoch(cfg: TrainConfig, train: Dataset) -> int:
    return max(1, len(train) // cfg.batch_size)


def finetune(h: Hypernet, cfg: TrainConfig, space: SpaceConfig, train: Dataset,
             *, start_epoch: int = 0, end_epoch: Optional[int] = None,
             optimizer: Optional[nn.Adam] = None,
             history: Optional[list[dict]] = None,
             epoch_callback: Optional[Callable[[int, nn.Adam, list[dict]], None]] = None,
             ) -> tuple[list[dict], nn.Adam]:
    """Run epochs ``start_epoch+1 .. end_epoch`` (default ``cfg.epochs``).

    Returns ``(history, optimizer)``; history rows are
    ``{"epoch", "loss", "lr"}``, one per epoch. Resuming from an epoch
    boundary with the returned optimizer and history continues exactly the
    run that a single call would have produced. A non-finite loss aborts
    with the offending architecture's hash.
    """
    cfg.validate()
    space.validate()
    if tuple(train.resolution) != tuple(space.input_resolution):
        raise GhnqError(
            f"dataset resolution {train.resolution} != space input resolution "
            f"{space.input_resolution}")
    optimizer = optimizer or make_optimizer(h, cfg)
    history = list(history or [])
    steps = steps_per_epoch(cfg, train)
    last_epoch = cfg.epochs if end_epoch is None else min(end_epoch, cfg.epochs)

    for epoch in range(start_epoch + 1, last_epoch + 1):
        lr = lr_at_epoch(cfg, epoch)
        optimizer.lr = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        epoch_losses = []
        for step in range(steps):
            rows = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = Tensor(train.images[rows])
            labels = train.labels[rows]
            global_step = (epoch - 1) * steps + step
            losses = []
            graphs = []
            for k in range(cfg.meta_batch_size):
                draw = global_step * cfg.meta_batch_size + k
                g = sample_architecture(space, draw)
                g = compute_virtual_edges(g, h.cfg.s_max)
                graphs.append(g)
                try:
                    params = predict(h, g)
                    logits = float_forward(g, params, batch)
                    losses.append(nn.softmax_cross_entropy(logits, labels))
                except FloatingPointError as exc:
                    raise TrainingDivergedError(
                        f"numerical blowup at epoch {epoch} step {step} for "
                        f"architecture {canonical_hash(g)[:16]}: {exc}") from exc
            for g, loss_t in zip(graphs, losses):
                if not math.isfinite(loss_t.item()):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step} for "
                        f"architecture {canonical_hash(g)[:16]}")
            total = losses[0]
            for loss_t in losses[1:]:
                total = total + loss_t
            mean_loss = total * (1.0 / cfg.meta_batch_size)
            optimizer.zero_grad()
            backward(mean_loss)
            optimizer.step()
            epoch_losses.append(mean_loss.item())
        history.append({"epoch": epoch,
                        "loss": float(np.mean(epoch_losses)),
                        "lr": lr})
        if epoch_callback is not None:
            epoch_callback(epoch, optimizer, history)
    return history, optimizer
