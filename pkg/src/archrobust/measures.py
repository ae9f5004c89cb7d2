"""Training-free sensitivity measures: input-Jacobian norm and input-Hessian top eigenvalue.

All functions work on any object exposing ``forward(x)``, ``logits_vjp(x, g)``
and ``loss_input_grad(x, y)`` for inputs shaped ``(N, ...)`` whose examples do
not interact (networks in eval mode).  Per-example quantities are averaged
over the batch.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .tinynet.layers import softmax

__all__ = [
    "MeasureProtocol",
    "MeasureResult",
    "HessianResult",
    "PowerIterationWarning",
    "jacobian_frobenius_proj",
    "jacobian_frobenius_exact",
    "jacobian_dense",
    "hessian_lambda_max",
    "hessian_dense",
    "measure_batches",
    "measure_network",
    "measure_all",
    "measurements_json",
    "LinearModel",
    "QuadraticModel",
]

STATES = ("random_init", "pretrained")
SPLITS = ("train", "test")


class PowerIterationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MeasureProtocol:
    n_batches: int = 10
    batch_size: int = 64
    n_projections: int = 16
    power_iters: int = 20
    tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_batches", "batch_size", "n_projections", "power_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MeasureResult:
    jacobian_frobenius: float
    hessian_lambda_max: float
    hessian_converged: bool = True


@dataclass
class HessianResult:
    value: float  # batch mean of the per-example magnitudes
    per_example: np.ndarray
    vectors: np.ndarray
    converged: bool
    history: list = field(default_factory=list)  # Rayleigh quotients per iteration, shape (N,)


# -- Jacobian ----------------------------------------------------------------


def _out_dim(model, x):
    return model.forward(x[:1]).shape[1]


def jacobian_frobenius_proj(model, x, n_proj: int = 16, seed: int = 0) -> float:
    """Random-projection estimate of the Jacobian Frobenius norm.

    For ``v`` uniform on the unit sphere of the output space,
    ``C * E|v^T J|^2 = |J|_F^2``.  The squared estimate is averaged over
    ``n_proj`` draws and the batch; the square root is returned.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = _out_dim(model, x)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_proj):
        v = rng.normal(size=(n, c))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        g = model.logits_vjp(x, v).reshape(n, -1)
        total += c * np.einsum("nd,nd->", g, g)
    return float(np.sqrt(total / (n_proj * n)))


def jacobian_dense(model, x, max_dim: int = 4096) -> np.ndarray:
    """Per-example Jacobians ``(N, C, D)`` assembled from one-hot VJPs."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    d = x[0].size
    if d > max_dim:
        raise ValueError(f"input dimension {d} exceeds the dense limit {max_dim}")
    c = _out_dim(model, x)
    jac = np.empty((n, c, d))
    for k in range(c):
        e = np.zeros((n, c))
        e[:, k] = 1.0
        jac[:, k] = model.logits_vjp(x, e).reshape(n, d)
    return jac


def jacobian_frobenius_exact(model, x, max_dim: int = 4096) -> float:
    """Root of the batch-mean squared Frobenius norm, from the dense Jacobian."""
    jac = jacobian_dense(model, x, max_dim)
    return float(np.sqrt(np.mean(np.sum(jac**2, axis=(1, 2)))))


# -- Hessian -----------------------------------------------------------------


def _hvp(model, x, y, v, h, g0=None, shrink=4, rtol=1e-3):
    """Central-difference Hessian-vector products, one per example.

    When the forward and backward one-sided differences of an example
    disagree, the step straddles a ReLU kink; its step is cut tenfold (up to
    ``shrink`` times) and the product recomputed.
    """
    n = len(x)
    _, gp = model.loss_input_grad(x + h * v, y)
    _, gm = model.loss_input_grad(x - h * v, y)
    hv = (gp - gm) / (2 * h)
    if g0 is None or shrink == 0:
        return hv
    fwd = ((gp - g0) / h).reshape(n, -1)
    bwd = ((g0 - gm) / h).reshape(n, -1)
    scale = np.maximum(np.linalg.norm(fwd, axis=1), np.linalg.norm(bwd, axis=1))
    bad = np.linalg.norm(fwd - bwd, axis=1) > rtol * scale + 1e-12
    if bad.any():
        idx = np.flatnonzero(bad)
        hv[idx] = _hvp(model, x[idx], y[idx], v[idx], h[idx] / 10, g0[idx], shrink - 1, rtol)
    return hv


def hessian_lambda_max(model, x, y, iters: int = 20, tol: float = 1e-3, seed: int = 0, h: float | None = None) -> HessianResult:
    """Largest-magnitude eigenvalue of each example's input Hessian of the CE loss.

    Power iteration with Hessian-vector products from central differences of
    exact input gradients, step ``h = 1e-4 * (1 + max|x|)`` per example unless
    given, shrunk where the difference straddles a ReLU kink.  An example has
    converged once successive Rayleigh quotients differ by at most
    ``tol * |q|``.  If some example has not converged
    after ``iters`` products, a ``PowerIterationWarning`` is issued and the
    last estimates are returned with ``converged=False``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n = len(x)
    flat = x.reshape(n, -1)
    if h is None:
        step = 1e-4 * (1 + np.abs(flat).max(axis=1))
    else:
        step = np.full(n, float(h))
    step = step.reshape((n,) + (1,) * (x.ndim - 1))
    rng = np.random.default_rng(seed)
    v = rng.normal(size=x.shape)
    v /= np.linalg.norm(v.reshape(n, -1), axis=1).reshape(step.shape)
    _, g0 = model.loss_input_grad(x, y)
    q = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    history = []
    for _ in range(iters):
        hv = _hvp(model, x, y, v, step, g0)
        q_new = np.einsum("nd,nd->n", v.reshape(n, -1), hv.reshape(n, -1))
        history.append(q_new)
        if len(history) > 1:
            done = np.abs(q_new - q) <= tol * np.abs(q_new)
        q = q_new
        norm = np.linalg.norm(hv.reshape(n, -1), axis=1)
        live = norm > 0
        v[live] = hv[live] / norm[live].reshape((-1,) + (1,) * (x.ndim - 1))
        done |= ~live
        if done.all():
            break
    converged = bool(done.all())
    if not converged:
        warnings.warn(f"power iteration did not converge for {int((~done).sum())} of {n} examples in {iters} iterations", PowerIterationWarning, stacklevel=2)
    lam = np.abs(q)
    return HessianResult(float(lam.mean()), lam, v, converged, history)


def hessian_dense(model, x) -> np.ndarray:
    """Per-example input Hessians ``J^T (diag p - p p^T) J`` of the CE loss.

    Exact almost everywhere for networks whose logits are piecewise affine in
    the input (ReLU, pooling, affine layers, eval-mode batch norm).
    """
    x = np.asarray(x, dtype=float)
    jac = jacobian_dense(model, x)
    p = softmax(model.forward(x))
    mid = np.einsum("nk,kl->nkl", p, np.eye(p.shape[1])) - np.einsum("nk,nl->nkl", p, p)
    return np.einsum("nkd,nkl,nle->nde", jac, mid, jac)


# -- closed-form models --------------------------------------------------------


class LinearModel:
    """Logits ``A x + b``; its Jacobian is ``A`` everywhere."""

    def __init__(self, A, b=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=float)

    def forward(self, x):
        return x.reshape(len(x), -1) @ self.A.T + self.b

    def logits_vjp(self, x, g):
        return (g @ self.A).reshape(x.shape)

    def loss_input_grad(self, x, y):
        z = self.forward(x)
        p = softmax(z)
        losses = -np.log(p[np.arange(len(y)), y])
        p[np.arange(len(y)), y] -= 1
        return losses, (p @ self.A).reshape(x.shape)


class QuadraticModel:
    """Loss ``x^T A x / 2`` per example (labels ignored); Hessian ``A``."""

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        self.A = (A + A.T) / 2

    def loss_input_grad(self, x, y):
        flat = x.reshape(len(x), -1)
        g = flat @ self.A
        return 0.5 * np.einsum("nd,nd->n", flat, g), g.reshape(x.shape)


# -- protocol ----------------------------------------------------------------


def _batches(data, protocol: MeasureProtocol):
    rng = np.random.default_rng(protocol.seed)
    need = protocol.n_batches * protocol.batch_size
    reps = -(-need // len(data))
    order = np.concatenate([rng.permutation(len(data)) for _ in range(reps)])[:need]
    for b in range(protocol.n_batches):
        idx = order[b * protocol.batch_size : (b + 1) * protocol.batch_size]
        yield data.images[idx], data.labels[idx]


def measure_batches(model, data, protocol: MeasureProtocol) -> MeasureResult:
    """Both measures averaged over ``protocol.n_batches`` mini-batches of ``data``."""
    jac, hes, ok = [], [], True
    for b, (x, y) in enumerate(_batches(data, protocol)):
        jac.append(jacobian_frobenius_proj(model, x, protocol.n_projections, seed=protocol.seed + b))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PowerIterationWarning)
            res = hessian_lambda_max(model, x, y, protocol.power_iters, protocol.tol, seed=protocol.seed + b)
        hes.append(res.value)
        ok &= res.converged
    return MeasureResult(float(np.mean(jac)), float(np.mean(hes)), bool(ok))


def measure_network(random_net, trained_net, train_set, test_set, protocol: MeasureProtocol) -> dict:
    """``{state: {split: MeasureResult}}`` for one architecture."""
    nets = {"random_init": random_net, "pretrained": trained_net}
    sets = {"train": train_set, "test": test_set}
    return {s: {sp: measure_batches(nets[s], sets[sp], protocol) for sp in SPLITS} for s in STATES if nets[s] is not None}


def measure_all(arch_ids, protocol: MeasureProtocol, train_set, test_set, config, pretrained, init_seed: int = 0) -> dict:
    """Measurement table for canonical ids.

    ``pretrained`` maps an id to its trained network (a dict or a callable);
    the randomly initialised network is built from ``init_seed``.
    """
    from .cellspace import canonical_id, cell_from_id
    from .tinynet import build_network

    get = pretrained if callable(pretrained) else pretrained.__getitem__
    table = {}
    for i in arch_ids:
        cid = canonical_id(int(i))
        fresh = build_network(cell_from_id(cid), config, seed=init_seed)
        table[str(cid)] = measure_network(fresh, get(cid), train_set, test_set, protocol)
    return table


def measurements_json(table: dict) -> dict:
    """``{id: {state: {split: {"jacobian": .., "hessian": .., "converged": ..}}}}``."""
    out = {}
    for i in sorted(table, key=int):
        out[i] = {
            s: {sp: {"jacobian": r.jacobian_frobenius, "hessian": r.hessian_lambda_max, "converged": r.hessian_converged} for sp, r in table[i][s].items()}
            for s in table[i]
        }
    return json.loads(json.dumps(out))
