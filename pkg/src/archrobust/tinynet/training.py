from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import SynthDataset
from .network import Network

__all__ = ["TrainingDiverged", "train", "augment_batch", "accuracy"]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, loss, cell):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step} for cell {cell}")
        self.epoch, self.step, self.loss = epoch, step, loss


def augment_batch(x, rng, pad=None):
    """Random horizontal flip and random crop from a zero-padded image."""
    n, _, h, w = x.shape
    pad = max(1, h // 8) if pad is None else pad
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    win = sliding_window_view(xp, (h, w), axis=(2, 3))
    return np.ascontiguousarray(win[np.arange(n), :, oy, ox])


def accuracy(net: Network, data: SynthDataset, batch_size=256) -> float:
    correct = 0
    for xb, yb in data.batches(batch_size):
        correct += int((net.forward(xb).argmax(axis=1) == yb).sum())
    return correct / len(data)


def _mean_loss(net, data, batch_size=256):
    total = 0.0
    for xb, yb in data.batches(batch_size):
        total += net.loss_and_grads(xb, yb)[0] * len(yb)
    return total / len(data)


def train(
    net: Network,
    data: SynthDataset,
    epochs: int = 10,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    augment: bool = True,
    clip_norm: float | None = 5.0,
) -> Network:
    """SGD with momentum and a cosine learning-rate schedule.

    Gradients are rescaled to at most ``clip_norm`` in global L2 norm, which
    keeps skip-heavy cells without batch norm from blowing up early on.
    Returns a new network; the loss history and final train accuracy are kept
    in ``info``.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    theta = net.theta.copy()
    buffers = {k: (m.copy(), v.copy()) for k, (m, v) in net.buffers.items()}
    velocity = np.zeros_like(theta)
    n = len(data)
    steps_per_epoch = max(1, -(-n // batch_size))
    total = epochs * steps_per_epoch
    current = net
    history = [_mean_loss(net, data)]
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            if augment:
                xb = augment_batch(xb, rng)
            loss, _, g, new_buffers = current.loss_and_grads(xb, yb, train=True)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(epoch, step, loss, current.cell)
            if clip_norm is not None:
                gn = float(np.linalg.norm(g))
                if gn > clip_norm:
                    g = g * (clip_norm / gn)
            rate = 0.5 * lr * (1 + np.cos(np.pi * step / total))
            velocity = momentum * velocity + g + weight_decay * theta
            theta = theta - rate * velocity
            buffers.update(new_buffers)
            current = current.with_params(theta, buffers)
            running += loss * len(idx)
            step += 1
        history.append(running / n)
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    info = dict(net.info)
    info.update(train_loss=history, train_accuracy=accuracy(current, data), epochs=epochs, lr=lr, train_seed=seed)
    return current.with_params(theta, buffers, info)
