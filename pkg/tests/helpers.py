"""Oracles shared between unit and acceptance tests."""

import itertools

import numpy as np

from archrobust import cellspace as cs
from archrobust.tinynet import NetworkConfig, build_network

FD_STEP = 1e-5

# acceptance verdict lines, printed in the terminal summary
ACCEPTANCE: list[str] = []


def verdict(criterion, ok, detail=""):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE.append(line)
    print(line)
    return ok

REL_FLOOR = 1e-6


def rel_error(a, b, floor=REL_FLOOR):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _fd(f, x0, e, h, shrink=3, rtol=2e-5, atol=1e-8):
    """Central difference of ``f`` along ``e``.

    A ReLU kink within ``h`` shows up as disagreeing one-sided differences;
    the step is then cut tenfold (up to ``shrink`` times) and the step with
    the best one-sided agreement is used.
    """
    f0 = f(x0)
    best = None
    for _ in range(shrink + 1):
        fp, fm = f(x0 + h * e), f(x0 - h * e)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        gap = abs(fwd - bwd)
        if best is None or gap < best[0]:
            best = (gap, (fp - fm) / (2 * h))
        if gap <= rtol * max(abs(fwd), abs(bwd)) + atol:
            break
        h /= 10
    return best[1]


def fd_gradient_check(net, x, y, rng, per_block=6, h=FD_STEP):
    """Max elementwise relative error of input and parameter gradients.

    All input coordinates are checked; parameters are sampled per block so
    every layer is covered.
    """
    loss, gx, gt = net.loss_and_grads(x, y)

    def f_x(xx):
        return net.loss_and_grads(xx, y)[0]

    def f_t(th):
        return net.with_params(th).loss_and_grads(x, y)[0]

    fx = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1.0
        fx[idx] = _fd(f_x, x, e, h)
    coords = []
    for name in net.param_names():
        off, shape = net._blocks[name]
        size = int(np.prod(shape))
        coords.extend(off + rng.choice(size, size=min(per_block, size), replace=False))
    ft, at = [], []
    for i in coords:
        e = np.zeros_like(net.theta)
        e[i] = 1.0
        ft.append(_fd(f_t, net.theta, e, h))
        at.append(gt[i])
    return float(rel_error(gx, fx).max()), float(rel_error(at, ft).max()), len(coords)


def class_function_spread(rep, cfg, x, seed=0):
    """Max abs difference between logits of all members of a class."""
    members = cs.equivalence_classes()[rep]
    ref = build_network(cs.cell_from_id(rep), cfg, seed).forward(x)
    worst = 0.0
    for m in members[1:]:
        out = build_network(cs.cell_from_id(m), cfg, seed).forward(x)
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst


def sample_classes(n, rng, max_size=None):
    classes = cs.equivalence_classes()
    reps = [r for r, ms in classes.items() if len(ms) > 1 and (max_size is None or len(ms) <= max_size)]
    return [int(r) for r in rng.choice(reps, size=n, replace=False)]


EQUIV_CONFIG = NetworkConfig(image_size=4, stem_width=4, num_classes=3)


class LinearSoftmax:
    """Duck-typed affine classifier with closed-form input gradients."""

    def __init__(self, W, b, shape):
        self.W, self.b, self.shape = np.asarray(W, float), np.asarray(b, float), tuple(shape)

    def forward(self, x):
        return x.reshape(len(x), -1) @ self.W.T + self.b

    def loss_input_grad(self, x, y):
        z = self.forward(x)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        losses = -np.log(p[np.arange(len(y)), y])
        p[np.arange(len(y)), y] -= 1
        return losses, (p @ self.W).reshape(x.shape)

    def logits_vjp(self, x, g):
        return (g @ self.W).reshape(x.shape)


class Recorder:
    """Wraps a network and keeps every input it is asked to differentiate."""

    def __init__(self, net):
        self.net, self.seen = net, []
        self.config = net.config

    def forward(self, x):
        return self.net.forward(x)

    def loss_input_grad(self, x, y):
        self.seen.append(np.array(x))
        return self.net.loss_input_grad(x, y)


def exact_record(key, accs, n=100, c=2, levels=()):
    """Record with accuracies rounded to multiples of 1/n and uniform confidences."""
    from archrobust.datastore import RobustnessRecord

    cms, confs, fracs = [], [], []
    for a in accs:
        right = int(round(a * n))
        cm = np.zeros((c, c), dtype=np.int64)
        cm[0, 0] = right
        cm[0, 1] = n - right
        cms.append(cm)
        fracs.append(right / n)
        confs.append({"label": np.full((c, c), 1 / c), "argmax": np.full((c, c), 1 / c), "prediction": np.array([0.5, 0.5])})
    return RobustnessRecord(key, fracs, confs, cms, list(levels))


def brute_tau_b(x, y):
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif dx == dy:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / np.sqrt((conc + disc + tx) * (conc + disc + ty))
