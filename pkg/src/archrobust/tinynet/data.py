"""Procedural image classification data standing in for CIFAR at desk scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkConfig

__all__ = ["SynthDataset", "synth_dataset", "SHAPES"]

SHAPES = ("hbars", "vbars", "disk", "checker", "diagonal", "ring", "cross", "square")


@dataclass(frozen=True)
class SynthDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    seed: int

    def __len__(self):
        return len(self.labels)

    def batches(self, size):
        for i in range(0, len(self), size):
            yield self.images[i : i + size], self.labels[i : i + size]

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.images[idx], self.labels[idx], self.split, self.seed)


def _masks(kind, n, h, rng):
    yy, xx = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    yy = yy[None].astype(float)
    xx = xx[None].astype(float)
    period = rng.uniform(3.0, 5.0, size=(n, 1, 1)) * h / 16
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    cy = rng.uniform(0.35, 0.65, size=(n, 1, 1)) * h
    cx = rng.uniform(0.35, 0.65, size=(n, 1, 1)) * h
    r = np.hypot(yy - cy, xx - cx)
    size = rng.uniform(0.2, 0.32, size=(n, 1, 1)) * h
    if kind == "hbars":
        return np.sin(2 * np.pi * yy / period + phase) > 0
    if kind == "vbars":
        return np.sin(2 * np.pi * xx / period + phase) > 0
    if kind == "disk":
        return r < size
    if kind == "checker":
        return (np.sin(2 * np.pi * yy / period + phase) > 0) ^ (np.sin(2 * np.pi * xx / period + phase) > 0)
    if kind == "diagonal":
        return np.sin(2 * np.pi * (xx + yy) / (1.4 * period) + phase) > 0
    if kind == "ring":
        return np.abs(r - size) < 0.1 * h
    if kind == "cross":
        w = 0.08 * h
        return (np.abs(yy - cy) < w) | (np.abs(xx - cx) < w)
    if kind == "square":
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return np.abs(d - size) < 0.08 * h
    raise ValueError(kind)


def _generate(cfg: NetworkConfig, n: int, rng: np.random.Generator):
    c, h = cfg.channels_in, cfg.image_size
    labels = np.arange(n) % cfg.num_classes
    labels = labels[rng.permutation(n)]
    images = np.empty((n, c, h, h))
    for k in range(cfg.num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        m = _masks(SHAPES[k], idx.size, h, rng)[:, None]
        fg = rng.uniform(0.55, 1.0, size=(idx.size, c, 1, 1))
        bg = rng.uniform(0.0, 0.45, size=(idx.size, c, 1, 1))
        flip = rng.random(idx.size) < 0.5
        fg[flip], bg[flip] = bg[flip].copy(), fg[flip].copy()
        images[idx] = np.where(m, fg, bg)
    images += rng.normal(0.0, 0.05, size=images.shape)
    return np.clip(images, 0.0, 1.0), labels.astype(np.int64)


def synth_dataset(cfg: NetworkConfig, n_train: int, n_test: int, seed: int = 0):
    """Return ``(train, test)`` splits of a class-balanced shape dataset."""
    if cfg.num_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} synthetic classes are available")
    ss = np.random.SeedSequence(seed)
    r_train, r_test = (np.random.default_rng(s) for s in ss.spawn(2))
    xtr, ytr = _generate(cfg, n_train, r_train)
    xte, yte = _generate(cfg, n_test, r_test)
    return SynthDataset(xtr, ytr, "train", seed), SynthDataset(xte, yte, "test", seed)
