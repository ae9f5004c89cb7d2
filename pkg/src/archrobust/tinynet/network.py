"""Cell-based macro network at desk scale.

Layout: 3x3 conv stem, then ``stages`` times (``cells_per_stage`` cells
followed by a stride-2 residual block that doubles the width), global average
pooling and a linear classifier.  Cell nodes sum their incoming edges.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..cellspace import EDGES, Cell, OpKind, decode_arch_string, encode_arch_string, term_expressions
from . import layers as L

__all__ = ["NetworkConfig", "Network", "build_network", "forward", "loss_and_grads", "predict_confidences"]


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 16
    channels_in: int = 3
    num_classes: int = 4
    stem_width: int = 8
    stages: int = 2
    cells_per_stage: int = 1
    batch_norm: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.stem_width % 2:
            raise ValueError("stem_width must be even")
        if self.image_size % (2**self.stages):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**stages")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels_in, self.image_size, self.image_size)

    @property
    def input_dim(self) -> int:
        return self.channels_in * self.image_size**2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _rng(seed: int, *key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *words]))


class _Layout:
    """Allocates named parameter blocks inside one flat vector."""

    def __init__(self):
        self.blocks: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.inits: list[np.ndarray] = []
        self.size = 0

    def add(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        self.blocks[name] = (self.size, value.shape)
        self.inits.append(value.ravel())
        self.size += value.size
        return name

    def vector(self):
        return np.concatenate(self.inits) if self.inits else np.zeros(0)


def _uniform(rng, shape, fan_in, gain):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


_HE = np.sqrt(6.0)


@dataclass
class _ConvSpec:
    w: str
    stride: int
    pad: int
    bn: tuple[str, str, str] | None  # (gamma, beta, buffer key)


@dataclass
class _CellSpec:
    # per edge: None (dropped), "skip", "pool" or a _ConvSpec
    edges: list
    live: list[bool]


@dataclass
class _DownSpec:
    a: _ConvSpec
    b: _ConvSpec
    short: _ConvSpec


class Network:
    """Immutable parameterised instance of a cell architecture.

    ``theta`` is the flat parameter vector; ``buffers`` holds batch-norm
    running statistics (empty when batch norm is disabled).
    """

    def __init__(self, cell: Cell, config: NetworkConfig, seed: int, theta=None, buffers=None, info=None):
        self.cell = cell
        self.config = config
        self.seed = int(seed)
        layout, self._stem, self._stages, self._head, init_buffers = _plan(cell, config, self.seed)
        self._blocks = layout.blocks
        theta = layout.vector() if theta is None else np.array(theta, dtype=np.float64)
        if theta.shape != (layout.size,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({layout.size},)")
        theta.flags.writeable = False
        self.theta = theta
        self.buffers = init_buffers if buffers is None else {k: (np.array(m), np.array(v)) for k, (m, v) in buffers.items()}
        self.info = dict(info or {})

    @property
    def num_params(self) -> int:
        return self.theta.size

    def param(self, name, theta=None):
        off, shape = self._blocks[name]
        t = self.theta if theta is None else theta
        return t[off : off + int(np.prod(shape))].reshape(shape)

    def param_names(self) -> list[str]:
        return list(self._blocks)

    def with_params(self, theta, buffers=None, info=None) -> "Network":
        """Same architecture and layout, new parameters."""
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ValueError(f"theta has shape {theta.shape}, expected {self.theta.shape}")
        theta.flags.writeable = False
        other = object.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.theta = theta
        src = self.buffers if buffers is None else buffers
        other.buffers = {k: (np.array(m), np.array(v)) for k, (m, v) in src.items()}
        other.info = dict(self.info if info is None else info)
        return other

    # -- evaluation ---------------------------------------------------------

    def forward(self, x, train=False):
        return self._run(x, train)[0]

    def logits_vjp(self, x, g_logits):
        """Vector-Jacobian product of the logits with respect to the input."""
        _, back, _ = self._run(x, False)
        gx, _ = back(g_logits, want_params=False)
        return gx

    def loss_input_grad(self, x, y):
        """Per-example CE losses and the gradient of their sum w.r.t. ``x``."""
        z, back, _ = self._run(x, False)
        losses, gz = L.cross_entropy(z, y)
        gx, _ = back(gz, want_params=False)
        return losses, gx

    def loss_and_grads(self, x, y, train=False):
        """Mean CE loss with exact gradients w.r.t. input and parameters."""
        z, back, new_buffers = self._run(x, train)
        losses, gz = L.cross_entropy(z, y)
        n = x.shape[0]
        gx, gtheta = back(gz / n, want_params=True)
        if train:
            return losses.mean(), gx, gtheta, new_buffers
        return losses.mean(), gx, gtheta

    def _run(self, x, train):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ValueError(f"expected batch of shape (N, {self.config.input_shape}), got {x.shape}")
        theta = self.theta
        tape: list[Callable] = []
        new_buffers: dict = {}

        def conv(h, spec: _ConvSpec, pre_relu: bool):
            caches = []
            if pre_relu:
                h, mask = L.relu_forward(h)
                caches.append(mask)
            w = self.param(spec.w)
            h, cc = L.conv2d_forward(h, w, spec.stride, spec.pad)
            bnc = None
            if spec.bn is not None:
                gname, bname, key = spec.bn
                h, bnc = L.batchnorm_forward(h, self.param(gname), self.param(bname), self.buffers[key], train)
                if train:
                    new_buffers[key] = bnc[4]

            def back(g, grad, need_dx=True):
                if bnc is not None:
                    g, gg, gb = L.batchnorm_backward(g, bnc)
                    if grad is not None:
                        _acc(grad, gname, gg)
                        _acc(grad, bname, gb)
                g, gw = L.conv2d_backward(g, w, cc, need_dx=need_dx or pre_relu)
                if grad is not None:
                    _acc(grad, spec.w, gw)
                if pre_relu and g is not None:
                    g = L.relu_backward(g, caches[0])
                return g

            return h, back

        def _acc(grad, name, value):
            off, shape = self._blocks[name]
            grad[off : off + value.size] += value.ravel()

        # stem
        # activations are channel-major (C, N, H, W) internally
        h, stem_back = conv(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), self._stem[0], pre_relu=False)
        sb = self.param(self._stem[1])
        h = h + sb[:, None, None, None]
        tape.append(("stem", stem_back))

        for stage_cells, down in self._stages:
            for cell_spec in stage_cells:
                h, cb = self._cell_forward(h, cell_spec, conv)
                tape.append(("cell", cb))
            h, db = self._down_forward(h, down, conv)
            tape.append(("down", db))

        pooled, gshape = L.gap_forward(h)
        wname, bname = self._head
        W, b = self.param(wname), self.param(bname)
        z, _ = L.linear_forward(pooled, W, b)

        def backward(gz, want_params=True):
            grad = np.zeros_like(theta) if want_params else None
            gp, gW, gb = L.linear_backward(gz, W, pooled)
            if grad is not None:
                _acc(grad, wname, gW)
                _acc(grad, bname, gb)
            g = L.gap_backward(gp, gshape)
            for kind, fn in reversed(tape):
                if kind == "stem":
                    if grad is not None:
                        _acc(grad, self._stem[1], g.sum(axis=(1, 2, 3)))
                    g = fn(g, grad)
                else:
                    g = fn(g, grad)
            return np.ascontiguousarray(g.transpose(1, 0, 2, 3)), grad

        return z, backward, new_buffers

    def _cell_forward(self, x, spec: _CellSpec, conv):
        nodes = [x, None, None, None]
        backs = []
        for e, (src, dst) in enumerate(EDGES):
            op = spec.edges[e]
            if op is None or not spec.live[e]:
                continue
            inp = nodes[src]
            if inp is None:
                continue
            if op == "skip":
                out, back = inp, (lambda g, grad: g)
            elif op == "pool":
                out, counts = L.avgpool3_forward(inp)
                back = (lambda counts: (lambda g, grad: L.avgpool3_backward(g, counts)))(counts)
            else:
                out, back = conv(inp, op, pre_relu=True)
            nodes[dst] = out if nodes[dst] is None else nodes[dst] + out
            backs.append((src, dst, back))
        out = nodes[3] if nodes[3] is not None else np.zeros_like(x)

        def back(g, grad):
            grads = [None, None, None, g]
            for src, dst, fn in reversed(backs):
                gd = grads[dst]
                if gd is None:
                    continue
                gs = fn(gd, grad)
                grads[src] = gs if grads[src] is None else grads[src] + gs
            return grads[0] if grads[0] is not None else np.zeros_like(x)

        return out, back

    def _down_forward(self, x, spec: _DownSpec, conv):
        a, ba = conv(x, spec.a, pre_relu=True)
        b, bb = conv(a, spec.b, pre_relu=True)
        p, _ = L.avgpool2_forward(x)
        s, bs = conv(p, spec.short, pre_relu=False)

        def back(g, grad):
            ga = bb(g, grad)
            gx = ba(ga, grad)
            gp = bs(g, grad)
            return gx + L.avgpool2_backward(gp)

        return b + s, back

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": "archrobust.tinynet/1",
            "config": self.config.to_dict(),
            "cell": encode_arch_string(self.cell),
            "seed": self.seed,
            "theta": self.theta.tolist(),
            "buffers": {k: [m.tolist(), v.tolist()] for k, (m, v) in self.buffers.items()},
            "info": self.info,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Network":
        if d.get("format") != "archrobust.tinynet/1":
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        return cls(
            decode_arch_string(d["cell"]),
            NetworkConfig(**d["config"]),
            d["seed"],
            theta=np.asarray(d["theta"], dtype=np.float64),
            buffers={k: (np.asarray(m), np.asarray(v)) for k, (m, v) in d["buffers"].items()},
            info=d.get("info"),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, encoding="utf-8") as fh:
            return cls.from_state_dict(json.load(fh))

    def __repr__(self):
        return f"Network({encode_arch_string(self.cell)!r}, params={self.num_params})"


def _plan(cell: Cell, cfg: NetworkConfig, seed: int):
    lay = _Layout()
    buffers: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def conv_spec(name, cin, cout, k, stride, pad, rng, gain=_HE):
        w = lay.add(name + ".w", _uniform(rng, (cout, cin, k, k), cin * k * k, gain))
        bn = None
        if cfg.batch_norm:
            g = lay.add(name + ".bn.gamma", np.ones(cout))
            b = lay.add(name + ".bn.beta", np.zeros(cout))
            buffers[name] = (np.zeros(cout), np.ones(cout))
            bn = (g, b, name)
        return _ConvSpec(w, stride, pad, bn)

    w0 = cfg.stem_width
    rng = _rng(seed, "stem")
    stem = conv_spec("stem", cfg.channels_in, w0, 3, 1, 1, rng, gain=np.sqrt(3.0))
    stem_bias = lay.add("stem.b", np.zeros(w0))

    terms = term_expressions(cell)
    live = _live_edges(cell)
    stages = []
    width = w0
    for s in range(cfg.stages):
        cells = []
        for k in range(cfg.cells_per_stage):
            edges = []
            for e, op in enumerate(cell.ops):
                if op == OpKind.NONE:
                    edges.append(None)
                elif op == OpKind.SKIP_CONNECT:
                    edges.append("skip")
                elif op == OpKind.AVG_POOL_3X3:
                    edges.append("pool")
                else:
                    ks = 3 if op == OpKind.NOR_CONV_3X3 else 1
                    edges.append(
                        conv_spec(f"s{s}.c{k}.e{e + 1}", width, width, ks, 1, ks // 2, _rng(seed, "cell", s, k, terms[e]))
                    )
            cells.append(_CellSpec(edges, live))
        rng = _rng(seed, "down", s)
        down = _DownSpec(
            conv_spec(f"s{s}.down.a", width, 2 * width, 3, 2, 1, rng),
            conv_spec(f"s{s}.down.b", 2 * width, 2 * width, 3, 1, 1, rng),
            conv_spec(f"s{s}.down.short", width, 2 * width, 1, 1, 0, rng, gain=np.sqrt(3.0)),
        )
        stages.append((cells, down))
        width *= 2
    rng = _rng(seed, "classifier")
    head = (
        lay.add("head.w", _uniform(rng, (cfg.num_classes, width), width, np.sqrt(3.0))),
        lay.add("head.b", np.zeros(cfg.num_classes)),
    )
    return lay, (stem, stem_bias), stages, head, buffers


def _live_edges(cell: Cell) -> list[bool]:
    """Edges with a path (over non-``none`` edges) from their target to the output."""
    reaches = {3: True}
    for n in (2, 1):
        reaches[n] = any(
            reaches.get(d, False) and cell.ops[e] != OpKind.NONE for e, (s, d) in enumerate(EDGES) if s == n
        )
    return [op != OpKind.NONE and reaches[d] for op, (_, d) in zip(cell.ops, EDGES)]


def build_network(cell: Cell, cfg: NetworkConfig | None = None, seed: int = 0) -> Network:
    """Deterministically initialise a network for ``cell``.

    Cell convolutions are seeded from ``(seed, stage, cell index, canonical
    term of the edge)``, so isomorphic cells built with the same seed compute
    the same function.
    """
    return Network(cell, cfg or NetworkConfig(), seed)


def forward(net: Network, batch) -> np.ndarray:
    return net.forward(batch)


def loss_and_grads(net: Network, batch, labels):
    return net.loss_and_grads(batch, labels)


def predict_confidences(net: Network, batch) -> np.ndarray:
    return L.softmax(net.forward(batch))
