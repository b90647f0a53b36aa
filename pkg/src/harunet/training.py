"""Supervised training: MSE loss, Adam, plateau LR schedule and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import nn_core
from .nn_core import ParameterStore
from .volume_io import DatasetManifest, read_png, resolve

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: int = 20
    min_lr: float = 1e-6
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or not self.lr0 > 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and lr0 > 0 required")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


class Adam:
    """Bias-corrected Adam over a :class:`ParameterStore`."""

    def __init__(self, params: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        if all(g is None for g in grads.values()):
            raise TrainingError("optimizer step before backward: no gradients populated")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        with torch.no_grad():
            for k, p in self.params.items():
                g = grads[k]
                if g is None:
                    g = torch.zeros_like(p)
                self.m[k].mul_(b1).add_(g, alpha=1 - b1)
                self.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
                denom = (self.v[k] / c2).sqrt_().add_(self.eps)
                p.addcdiv_(self.m[k] / c1, denom, value=-lr)


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


class PlateauScheduler:
    """Tracks validation loss; shrinks the LR on plateaus and signals early stopping.

    Improvement means a strict decrease of the best loss seen so far.
    The early-stop check runs before the plateau check, so the epoch that
    triggers stopping does not also shrink the LR.
    """

    def __init__(self, lr0, patience=5, factor=0.5, stop_patience=20, min_lr=1e-6):
        self.lr = lr0
        self.patience, self.factor = patience, factor
        self.stop_patience, self.min_lr = stop_patience, min_lr
        self.best = math.inf
        self.since_best = 0
        self.since_reduce = 0

    def step(self, val_loss: float) -> str:
        """Returns 'improved', 'reduced', 'stop' or 'wait'."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self.since_reduce = 0
            return "improved"
        self.since_best += 1
        self.since_reduce += 1
        if self.since_best >= self.stop_patience:
            return "stop"
        if self.since_reduce >= self.patience:
            self.since_reduce = 0
            self.lr = max(self.lr * self.factor, self.min_lr)
            return "reduced"
        return "wait"


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val(self) -> float:
        return min(self.val_loss) if self.val_loss else math.inf

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_time_s"])
            for i in range(self.epochs):
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                            repr(self.lr[i]), f"{self.wall_time[i]:.3f}"])


def load_pairs(manifest: DatasetManifest, manifest_path, split: str):
    """Stack the (noisy, clean) patches of one split as float32 N x H x W arrays."""
    pairs = manifest.pairs(split)
    if not pairs:
        return np.zeros((0, 1, 1), np.float32), np.zeros((0, 1, 1), np.float32)
    noisy = np.stack([read_png(resolve(manifest_path, n)) for n, _ in pairs])
    clean = np.stack([read_png(resolve(manifest_path, c)) for _, c in pairs])
    return noisy, clean


def evaluate_loss(net, noisy, clean, batch_size=32) -> float:
    """Mean squared error over all pixels of all pairs."""
    dtype = next(net.parameters()).dtype
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(noisy), batch_size):
            x = torch.as_tensor(noisy[i:i + batch_size], dtype=dtype)[:, None]
            y = torch.as_tensor(clean[i:i + batch_size], dtype=dtype)[:, None]
            total += float(((net(x) - y) ** 2).sum(dtype=torch.float64))
            count += y.numel()
    return total / count


def train_arrays(net, train_xy, val_xy, cfg: TrainConfig = TrainConfig(),
                 out_dir=None, max_steps: Optional[int] = None):
    """Train ``net`` in place on (noisy, clean) arrays.

    Returns ``(best_state, history)``; ``best_state`` maps parameter names
    to arrays at the epoch with the lowest validation loss. ``max_steps``
    caps the optimizer steps per epoch.
    """
    xs, ys = train_xy
    vx, vy = val_xy
    if len(xs) == 0 or len(vx) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    params = net.params
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor,
                             cfg.early_stop_patience, cfg.min_lr)
    hist = TrainHistory()
    best_state = params.state()
    dtype = next(net.parameters()).dtype
    if cfg.max_epochs == 0:
        hist.stop_reason = "epoch budget"
        return best_state, hist

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(xs))
        lr = sched.lr
        losses = []
        net.train()
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[i:i + cfg.batch_size]
            x = torch.as_tensor(xs[idx], dtype=dtype)[:, None]
            y = torch.as_tensor(ys[idx], dtype=dtype)[:, None]
            params.zero_grad()
            loss = mse_loss(net(x), y)
            val = float(loss.detach())
            if not math.isfinite(val):
                raise TrainingError(f"non-finite training loss at epoch {epoch + 1}, step {step + 1}: {val}")
            nn_core.backward(loss)
            opt.step(lr)
            losses.append(val)
        net.eval()
        vloss = evaluate_loss(net, vx, vy)
        if not math.isfinite(vloss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(vloss)
        hist.lr.append(lr)
        hist.wall_time.append(time.perf_counter() - t0)
        action = sched.step(vloss)
        log.info("epoch %d train %.6g val %.6g lr %.3g %s", epoch + 1, hist.train_loss[-1], vloss, lr, action)
        if action == "improved":
            best_state = params.state()
            hist.best_epoch = epoch + 1
        if action == "stop":
            hist.stop_reason = "early stop"
            break
    else:
        hist.stop_reason = "epoch budget"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nn_core.save_checkpoint(best_state, out / "best.hckpt")
        (out / "network.cfg").write_text(net.config.to_text())
        hist.write_csv(out / "history.csv")
    return best_state, hist


def train(net, manifest: DatasetManifest, cfg: TrainConfig = TrainConfig(), manifest_path=".",
          out_dir=None, max_steps: Optional[int] = None):
    """Train on the manifest's train split, validating on its val split."""
    train_xy = load_pairs(manifest, manifest_path, "train")
    val_xy = load_pairs(manifest, manifest_path, "val")
    if len(train_xy[0]) == 0 or len(val_xy[0]) == 0:
        raise TrainingError("manifest needs non-empty train and val splits")
    return train_arrays(net, train_xy, val_xy, cfg, out_dir, max_steps)
