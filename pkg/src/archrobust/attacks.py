"""L-infinity attacks: FGSM, PGD, APGD-CE and the Square attack.

Images live in [0, 1] and every epsilon is an absolute pixel offset (the
schedules below are multiples of 1/255).  All attacks accept a scalar epsilon
or one epsilon per example, which lets :func:`evaluate` attack a whole epsilon
schedule in one batched run.

The network argument is duck-typed: ``forward(x)`` returning logits and
``loss_input_grad(x, y)`` returning per-example cross-entropy losses and the
gradient of their sum with respect to ``x``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .datastore import ATTACK_KEYS, EPSILON_NUMERATORS, RobustnessRecord
from .evaluation import predict_probs, record_from_probs

__all__ = [
    "ATTACK_KEYS",
    "PGD_MODES",
    "APGD_CHECKPOINTS",
    "SQUARE_SCHEDULE",
    "AttackConfig",
    "AdvBatch",
    "default_epsilons",
    "fgsm",
    "pgd",
    "apgd",
    "square_attack",
    "margins",
    "run_attack",
    "evaluate",
]

PGD_MODES = ("least_likely_targeted", "untargeted")
APGD_CHECKPOINTS = (0.22, 0.41, 0.56, 0.68, 0.77, 0.84, 0.89, 0.93)
# fractions of the budget at which the square side shrinks by 1/sqrt(2)
SQUARE_SCHEDULE = (0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8)
DEFAULT_ITERATIONS = {"fgsm": 1, "pgd": 40, "aa_apgd-ce": 100, "aa_square": 5000}


def default_epsilons(kind: str) -> tuple[float, ...]:
    return tuple(v / 255 for v in EPSILON_NUMERATORS[kind])


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilons: tuple[float, ...] | None = None
    alpha: float = 0.01 / 0.3
    iterations: int | None = None
    pgd_mode: str = "least_likely_targeted"
    seed: int = 0
    rho: float = 0.75
    checkpoints: tuple[float, ...] = APGD_CHECKPOINTS
    square_init: float = 0.8

    def __post_init__(self):
        if self.kind not in ATTACK_KEYS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KEYS}")
        if self.pgd_mode not in PGD_MODES:
            raise ValueError(f"unknown pgd_mode {self.pgd_mode!r}")
        eps = default_epsilons(self.kind) if self.epsilons is None else tuple(float(e) for e in self.epsilons)
        if any(e < 0 or not math.isfinite(e) for e in eps):
            raise ValueError("epsilons must be finite and non-negative")
        object.__setattr__(self, "epsilons", eps)
        it = DEFAULT_ITERATIONS[self.kind] if self.iterations is None else int(self.iterations)
        if it < 1:
            raise ValueError("iterations must be >= 1")
        object.__setattr__(self, "iterations", it)

    @property
    def numerators(self) -> list[float]:
        return [round(e * 255, 10) for e in self.epsilons]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epsilons"] = list(self.epsilons)
        d["checkpoints"] = list(self.checkpoints)
        return d


@dataclass
class AdvBatch:
    """Adversarial inputs and per-example bookkeeping.

    ``objective`` is the final loss (gradient attacks) or margin (Square);
    ``history`` is attack specific: the loss of every APGD iterate as an
    ``(iterations + 1, N)`` array, or one list of accepted margins per example
    for Square.
    """

    x_adv: np.ndarray
    success: np.ndarray
    objective: np.ndarray | None = None
    history: object = None
    queries: np.ndarray | None = None


def _eps(eps, n) -> np.ndarray:
    e = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    if np.any(e < 0):
        raise ValueError("epsilon must be non-negative")
    return e.reshape(n, 1, 1, 1)


def _project(z, x, e):
    return np.clip(np.clip(z, x - e, x + e), 0.0, 1.0)


def _success(net, x_adv, y):
    return net.forward(x_adv).argmax(axis=1) != y


def margins(logits, y) -> np.ndarray:
    """``f_y - max_{k != y} f_k`` per example (negative means misclassified)."""
    n = len(y)
    true = logits[np.arange(n), y]
    other = logits.copy()
    other[np.arange(n), y] = -np.inf
    return true - other.max(axis=1)


def fgsm(net, x, y, eps) -> AdvBatch:
    """One signed-gradient step of size ``eps`` on the cross-entropy loss."""
    x = np.asarray(x, dtype=np.float64)
    e = _eps(eps, len(x))
    _, g = net.loss_input_grad(x, y)
    x_adv = np.clip(x + e * np.sign(g), 0.0, 1.0)
    return AdvBatch(x_adv, _success(net, x_adv, y))


def pgd(net, x, y, eps, alpha=0.01 / 0.3, iterations=40, mode="least_likely_targeted") -> AdvBatch:
    """Iterated signed-gradient steps projected on the epsilon ball.

    ``alpha`` is relative to epsilon (step ``alpha * eps``).  The default mode
    descends the loss of the least likely class at the clean input; the
    untargeted mode ascends the loss of the true label.  Starts at ``x``.
    """
    if mode not in PGD_MODES:
        raise ValueError(f"unknown pgd mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    e = _eps(eps, len(x))
    step = alpha * e
    if mode == "least_likely_targeted":
        target, sign = net.forward(x).argmin(axis=1), -1.0
    else:
        target, sign = y, 1.0
    x_adv = x.copy()
    for _ in range(iterations):
        _, g = net.loss_input_grad(x_adv, target)
        x_adv = _project(x_adv + sign * step * np.sign(g), x, e)
    return AdvBatch(x_adv, _success(net, x_adv, y))


def apgd(net, x, y, eps, iterations=100, rho=0.75, checkpoints=APGD_CHECKPOINTS, momentum=0.75) -> AdvBatch:
    """Untargeted APGD on the cross-entropy loss.

    Step size starts at ``2 eps``.  At each checkpoint an example halves its
    step and restarts from its best point when the loss increased in fewer
    than ``rho`` of the steps since the previous checkpoint, or when neither
    the step nor the best loss changed since then.  Returns the highest-loss
    iterate.  Starts at ``x``, so the run is deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    e = _eps(eps, n)
    marks = sorted({int(math.ceil(p * iterations)) for p in checkpoints if 0 < math.ceil(p * iterations) <= iterations})
    step = 2.0 * e.copy()
    x_k = x.copy()
    loss_k, g_k = net.loss_input_grad(x_k, y)
    best_x, best_loss, best_g = x_k.copy(), loss_k.copy(), g_k.copy()
    history = [loss_k.copy()]
    x_prev = x_k
    increases = np.zeros(n)
    last_mark = 0
    best_at_mark = best_loss.copy()
    reduced_at_mark = np.zeros(n, dtype=bool)
    for k in range(iterations):
        z = _project(x_k + step * np.sign(g_k), x, e)
        if k == 0:
            x_new = z
        else:
            x_new = _project(x_k + momentum * (z - x_k) + (1 - momentum) * (x_k - x_prev), x, e)
        loss_new, g_new = net.loss_input_grad(x_new, y)
        increases += loss_new > loss_k
        better = loss_new > best_loss
        best_x[better], best_g[better] = x_new[better], g_new[better]
        best_loss = np.where(better, loss_new, best_loss)
        x_prev, x_k, loss_k, g_k = x_k, x_new, loss_new, g_new
        history.append(loss_new.copy())
        it = k + 1
        if it in marks:
            few = increases < rho * (it - last_mark)
            stalled = ~reduced_at_mark & (best_at_mark >= best_loss)
            cut = few | stalled
            step[cut] /= 2.0
            x_k, g_k = x_k.copy(), g_k.copy()
            x_k[cut] = best_x[cut]
            g_k[cut] = best_g[cut]
            loss_k = np.where(cut, best_loss, loss_k)
            # restart without momentum
            x_prev = x_prev.copy()
            x_prev[cut] = x_k[cut]
            reduced_at_mark, best_at_mark = cut, best_loss.copy()
            increases[:] = 0
            last_mark = it
    return AdvBatch(best_x, _success(net, best_x, y), best_loss, np.array(history))


def _square_side(i, iterations, init_side):
    shrink = sum(i >= f * iterations for f in SQUARE_SCHEDULE)
    return max(1, int(round(init_side / 2 ** (shrink / 2))))


def square_attack(net, x, y, eps, iterations=5000, seed=0, init=0.8) -> AdvBatch:
    """Random search over ``±eps`` square patches minimising the margin.

    Starts from per-channel vertical stripes of ``±eps``; each step redraws
    one square of side ``h`` (initially ``ceil(init * H)``, shrinking over the
    budget) with a random sign per channel and keeps it only if the margin
    strictly decreases.  Examples stop once their margin is negative; an
    epsilon of zero admits no change and is never queried.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n, c, h, w = x.shape
    e = _eps(eps, n)
    rng = np.random.default_rng(seed)
    delta = np.broadcast_to(e * rng.choice([-1.0, 1.0], size=(n, c, 1, w)), x.shape).copy()
    x_adv = np.clip(x + delta, 0.0, 1.0)
    margin = margins(net.forward(x_adv), y)
    history = [[float(m)] for m in margin]
    queries = np.ones(n, dtype=np.int64)
    init_side = min(h, int(math.ceil(init * h)))
    rows = np.arange(h)
    cols = np.arange(w)
    for i in range(iterations):
        active = np.flatnonzero((margin >= 0) & (e.ravel() > 0))
        if active.size == 0:
            break
        s = min(_square_side(i, iterations, init_side), h, w)
        r0 = rng.integers(0, h - s + 1, size=active.size)
        c0 = rng.integers(0, w - s + 1, size=active.size)
        signs = rng.choice([-1.0, 1.0], size=(active.size, c, 1, 1))
        inside = ((rows >= r0[:, None]) & (rows < r0[:, None] + s))[:, :, None] & (
            (cols >= c0[:, None]) & (cols < c0[:, None] + s)
        )[:, None, :]
        cand = np.where(inside[:, None], e[active] * signs, delta[active])
        x_cand = np.clip(x[active] + cand, 0.0, 1.0)
        m_cand = margins(net.forward(x_cand), y[active])
        queries[active] += 1
        accept = m_cand < margin[active]
        idx = active[accept]
        delta[idx] = cand[accept]
        x_adv[idx] = x_cand[accept]
        margin[idx] = m_cand[accept]
        for j, m in zip(idx, m_cand[accept]):
            history[j].append(float(m))
    return AdvBatch(x_adv, margin < 0, margin, history, queries)


def run_attack(net, x, y, cfg: AttackConfig, eps) -> AdvBatch:
    """Dispatch ``cfg.kind`` with per-example or scalar ``eps``."""
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, eps)
    if cfg.kind == "pgd":
        return pgd(net, x, y, eps, cfg.alpha, cfg.iterations, cfg.pgd_mode)
    if cfg.kind == "aa_apgd-ce":
        return apgd(net, x, y, eps, cfg.iterations, cfg.rho, cfg.checkpoints)
    return square_attack(net, x, y, eps, cfg.iterations, cfg.seed, cfg.square_init)


def evaluate(net, data, cfg: AttackConfig, batch_size=512, return_batches=False):
    """Attack the full test split once per epsilon and collect a record.

    Examples are tiled over the epsilon schedule and attacked in one pass, so
    the per-epsilon results are identical to separate runs for the
    deterministic attacks.
    """
    x, y = data.images, data.labels
    n, k = len(y), len(cfg.epsilons)
    xs = np.tile(x, (k, 1, 1, 1))
    ys = np.tile(y, k)
    es = np.repeat(np.asarray(cfg.epsilons, dtype=np.float64), n)
    advs = []
    for i in range(0, len(ys), batch_size):
        advs.append(run_attack(net, xs[i : i + batch_size], ys[i : i + batch_size], cfg, es[i : i + batch_size]))
    x_adv = np.concatenate([a.x_adv for a in advs])
    probs = predict_probs(net, x_adv)
    record = record_from_probs(cfg.kind, [probs[j * n : (j + 1) * n] for j in range(k)], y, net.config.num_classes, cfg.numerators)
    if return_batches:
        return record, advs, es
    return record
