"""Seedable image corruptions at five severity levels and their evaluation.

Images are float arrays in ``[0, 1]`` shaped ``(N, C, H, W)`` (a single
``(C, H, W)`` image is accepted too).  Noise kinds draw from a generator
seeded by ``(seed, kind, severity)``; the others are deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .datastore import CORRUPTION_KEYS, SEVERITIES, RobustnessRecord
from .evaluation import predict_probs, record_from_probs

__all__ = [
    "KINDS",
    "LADDERS",
    "LADDER_VERSION",
    "UnsupportedCorruption",
    "corrupt",
    "corrupt_dataset",
    "evaluate_corruption",
    "defocus_kernel",
]

LADDER_VERSION = "1"

# One parameter per severity 1..5.  Noise strengths and blur radii grow,
# photon counts, contrast factors and pixelation scales shrink.
LADDERS: dict[str, tuple] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot_noise": (500, 250, 100, 75, 50),
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),
    "pixelate": (0.95, 0.9, 0.85, 0.75, 0.65),
    "defocus_blur": ((0.3, 0.4), (0.4, 0.5), (0.5, 0.6), (1.0, 0.2), (1.5, 0.1)),
}
KINDS = tuple(LADDERS)
assert set(KINDS) <= set(CORRUPTION_KEYS)


class UnsupportedCorruption(ValueError):
    """A valid corruption key that has no analytic implementation here."""


def _check(kind, severity):
    if kind not in LADDERS:
        if kind in CORRUPTION_KEYS:
            raise UnsupportedCorruption(f"{kind!r} needs external assets and is not implemented; available: {', '.join(KINDS)}")
        raise ValueError(f"unknown corruption {kind!r}")
    if not (isinstance(severity, (int, np.integer)) and 1 <= severity <= SEVERITIES):
        raise ValueError(f"severity must be an integer in 1..{SEVERITIES}, got {severity!r}")


def _rng(seed, kind, severity):
    return np.random.default_rng([int(seed), KINDS.index(kind), int(severity)])


def defocus_kernel(radius: float, alias_blur: float) -> np.ndarray:
    """Disk of the given radius, smoothed by a 3-tap Gaussian, summing to one."""
    span = max(1, int(np.ceil(radius))) + 1
    ax = np.arange(-span, span + 1, dtype=float)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    disk = (yy**2 + xx**2 <= radius**2).astype(float)
    disk /= disk.sum()
    taps = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * alias_blur**2))
    taps /= taps.sum()
    k = ndimage.convolve1d(ndimage.convolve1d(disk, taps, axis=0, mode="mirror"), taps, axis=1, mode="mirror")
    return k / k.sum()


def _pixelate(x, scale):
    h, w = x.shape[-2:]
    sh, sw = max(1, int(h * scale)), max(1, int(w * scale))
    # area-average down to (sh, sw), nearest-neighbour back up
    ry = _area_matrix(h, sh)
    rx = _area_matrix(w, sw)
    small = np.einsum("ph,nchw,qw->ncpq", ry, x, rx)
    iy = np.minimum((np.arange(h) + 0.5) * sh / h, sh - 1).astype(int)
    ix = np.minimum((np.arange(w) + 0.5) * sw / w, sw - 1).astype(int)
    return small[:, :, iy][:, :, :, ix]


def _area_matrix(n, m):
    """Rows are the overlap weights of ``m`` equal bins over ``n`` pixels."""
    edges = np.linspace(0, n, m + 1)
    lo = np.maximum(edges[:-1, None], np.arange(n)[None])
    hi = np.minimum(edges[1:, None], np.arange(n)[None] + 1)
    wgt = np.clip(hi - lo, 0, None)
    return wgt / wgt.sum(axis=1, keepdims=True)


def corrupt(x: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Corrupted copy of ``x``, clipped to ``[0, 1]``."""
    _check(kind, severity)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) or (C, H, W), got shape {x.shape}")
    p = LADDERS[kind][severity - 1]
    if kind == "gaussian_noise":
        out = x + _rng(seed, kind, severity).normal(scale=p, size=x.shape)
    elif kind == "shot_noise":
        out = _rng(seed, kind, severity).poisson(x * p) / p
    elif kind == "impulse_noise":
        rng = _rng(seed, kind, severity)
        hit = rng.random(x.shape) < p
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(float), x)
    elif kind == "brightness":
        out = x + p
    elif kind == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        out = (x - mean) * p + mean
    elif kind == "pixelate":
        out = _pixelate(x, p)
    else:
        k = defocus_kernel(*p)
        out = ndimage.convolve(x, k[None, None], mode="mirror")
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def corrupt_dataset(data, kind: str, severity: int, seed: int = 0):
    return type(data)(corrupt(data.images, kind, severity, seed), data.labels, data.split, data.seed)


def evaluate_corruption(net, data, kind: str, seed: int = 0, batch_size: int = 256) -> RobustnessRecord:
    """Five-entry record, one per severity, stored under the corruption key."""
    probs = [predict_probs(net, corrupt(data.images, kind, s, seed), batch_size) for s in range(1, SEVERITIES + 1)]
    return record_from_probs(kind, probs, data.labels, net.config.num_classes, list(range(1, SEVERITIES + 1)))
