"""Desk-scale training: AdamW, warmup + cosine schedule, label-smoothed cross-entropy.

Also holds the synthetic blob dataset and its on-disk form (ETF v1 files plus a
JSON manifest of ``[path, label]`` pairs).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import etf
from .builder import LayerGraph
from .errors import TrainingError

log = logging.getLogger(__name__)

LR_PER_128 = 1.25e-4


@dataclass
class TrainConfig:
    """Optimization recipe; ``base_lr`` is per 128 samples and scaled linearly with ``batch_size``."""

    epochs: int = 20
    batch_size: int = 16
    base_lr: float = LR_PER_128
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / 128.0


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Learning rate for 1-based ``step``: linear warmup to ``peak``, then cosine decay to 0."""
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * step / warmup_steps
    decay = max(total_steps - warmup_steps, 1)
    t = min(step - warmup_steps, decay) / decay
    return 0.5 * peak * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay: ``w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)``."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if p.decay and self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smoothed_cross_entropy(logits, labels, smoothing: float = 0.1):
    """Mean loss and its gradient w.r.t. ``logits`` (n, K).

    Target puts 1 - s on the true class and s / (K - 1) on each other class.
    """
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must lie in [0, 1)")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    target = np.full((n, k), smoothing / (k - 1) if k > 1 else 0.0)
    target[np.arange(n), labels] = 1.0 - smoothing if k > 1 else 1.0
    lp = log_softmax(logits)
    loss = float(-(target * lp).sum() / n)
    grad = (np.exp(lp) - target) / n
    return loss, grad


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

CLASS_COLORS = np.array([
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
])


def make_blobs(n: int = 200, classes: int = 4, size: int = 64, seed: int = 0, noise: float = 0.3):
    """Images holding one disc of a class-specific color at a random place on a noisy background."""
    if classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    yy, xx = np.mgrid[0:size, 0:size]
    X = rng.normal(0.0, noise, size=(n, 3, size, size))
    for i in range(n):
        r = rng.uniform(size / 8, size / 4)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        X[i][:, mask] += CLASS_COLORS[y[i]][:, None]
    return X, y


@dataclass
class DatasetHandle:
    samples: np.ndarray  # (n, 3, h, w)
    labels: np.ndarray
    num_classes: int
    paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("dataset must be nonempty with one label per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def split(self, val_fraction: float, seed: int = 0):
        idx = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        tr, va = idx[n_val:], idx[:n_val]
        return (DatasetHandle(self.samples[tr], self.labels[tr], self.num_classes),
                DatasetHandle(self.samples[va], self.labels[va], self.num_classes) if n_val else None)


def write_dataset(directory, samples, labels, num_classes: Optional[int] = None) -> str:
    """Write one ETF file per sample plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (x, y) in enumerate(zip(samples, labels)):
        fn = f"sample_{i:05d}.etf"
        etf.write(os.path.join(directory, fn), np.asarray(x, dtype=np.float32))
        entries.append([fn, int(y)])
    manifest = {"num_classes": int(num_classes or int(np.max(labels)) + 1), "samples": entries}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def load_dataset(directory) -> DatasetHandle:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    entries = manifest["samples"] if isinstance(manifest, dict) else manifest
    paths = [os.path.join(directory, p) for p, _ in entries]
    labels = np.array([y for _, y in entries])
    samples = np.stack([etf.read(p) for p in paths]).astype(np.float64)
    k = manifest.get("num_classes") if isinstance(manifest, dict) else None
    return DatasetHandle(samples, labels, int(k or labels.max() + 1), paths)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


def evaluate(graph: LayerGraph, data: DatasetHandle, batch_size: int = 64) -> float:
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = graph(data.samples[i:i + batch_size], train=False)
        correct += int((logits.argmax(axis=1) == data.labels[i:i + batch_size]).sum())
    return correct / len(data)


def train(graph: LayerGraph, dataset: DatasetHandle, cfg: TrainConfig) -> List[EpochRecord]:
    """Train in place; returns per-epoch history.

    Train accuracy counts train-mode predictions made during the epoch.
    """
    dtype = np.dtype(cfg.dtype)
    for _, p in graph.named_parameters():
        p.data = p.data.astype(dtype)
    train_set, val_set = dataset.split(cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    opt = AdamW([p for _, p in graph.named_parameters()], cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum, correct, lr = 0.0, 0, 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = train_set.samples[idx].astype(dtype)
            y = train_set.labels[idx]
            step += 1
            lr = lr_at(step, total, warmup, cfg.lr)
            logits, cache = graph.forward(x, train=True)
            loss, g = smoothed_cross_entropy(logits, y, cfg.label_smoothing)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}, lr {lr:.3g}")
            opt.zero_grad()
            graph.backward(cache, g.astype(dtype))
            opt.step(lr)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        rec = EpochRecord(epoch, lr, loss_sum / len(train_set), correct / len(train_set),
                          evaluate(graph, val_set) if val_set is not None else float("nan"))
        log.info("epoch %d lr %.3g loss %.4f train_acc %.3f val_acc %.3f", rec.epoch, rec.lr,
                 rec.train_loss, rec.train_acc, rec.val_acc)
        history.append(rec)
    return history


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for r in history:
            w.writerow([r.epoch, f"{r.lr:.6g}", f"{r.train_loss:.6f}", f"{r.train_acc:.4f}", f"{r.val_acc:.4f}"])
