"""Tabular architecture search over canonical cells.

Every searcher queries an :class:`Objective` through a session that charges
one unit of budget per *new* architecture; repeated requests are answered
from the cache for free.  All randomness comes from one seeded generator, so
a ``(searcher, objective, budget, seed)`` tuple always yields the same trace.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .cellspace import NUM_EDGES, Cell, OpKind, canonical_id, canonical_ids, cell_from_id, decode_arch_string, mutate, neighbors

__all__ = [
    "SEARCH_DEFAULTS",
    "SearchSpace",
    "Objective",
    "SearchTrace",
    "BudgetExhausted",
    "random_search",
    "local_search",
    "regularized_evolution",
    "bananas_lite",
    "SEARCHERS",
    "featurize",
    "MLPEnsemble",
    "benchmark_protocol",
    "report_csv",
    "report_json",
    "mini_space",
]

SEARCH_DEFAULTS = {
    "version": "1",
    "local_search": {"restart": True},
    "regularized_evolution": {"population": 30, "sample": 10},
    "bananas_lite": {"ensemble": 5, "candidates": 100, "warmup": 10, "top": 10, "hidden": 32, "epochs": 200, "lr": 0.01},
}


# -- space and objective -----------------------------------------------------


class SearchSpace:
    """A set of canonical architecture ids with a neighbourhood structure.

    Neighbours of ``cid`` are the canonical ids of the single-edge edits of
    its representative cell that stay inside the space, in ``neighbors``
    order, deduplicated, without ``cid`` itself.
    """

    def __init__(self, ids):
        ids = sorted({canonical_id(int(i)) for i in ids})
        if not ids:
            raise ValueError("empty search space")
        self.ids = tuple(ids)
        self._members = frozenset(ids)
        self._nbrs: dict[int, tuple[int, ...]] = {}
        self._raw: dict[int, tuple[tuple[int, int], ...]] = {}

    @classmethod
    def full(cls) -> "SearchSpace":
        return cls(canonical_ids())

    def __len__(self):
        return len(self.ids)

    def __contains__(self, cid) -> bool:
        return cid in self._members

    def edits(self, cid: int) -> tuple[tuple[int, int], ...]:
        """``(raw local id, canonical id)`` of every in-space single-edge edit."""
        if cid not in self._raw:
            out = []
            for nb in neighbors(cell_from_id(cid)):
                c = canonical_id(nb)
                if c != cid and c in self._members:
                    out.append((nb.local_id, c))
            self._raw[cid] = tuple(out)
        return self._raw[cid]

    def neighbors(self, cid: int) -> tuple[int, ...]:
        if cid not in self._nbrs:
            seen, out = set(), []
            for _, c in self.edits(cid):
                if c not in seen:
                    seen.add(c)
                    out.append(c)
            self._nbrs[cid] = tuple(out)
        return self._nbrs[cid]


def mini_space(fixed: OpKind = OpKind.NOR_CONV_3X3) -> SearchSpace:
    """The 125 cells whose edges into the output node vary while the others are fixed.

    Isomorphic cells merge, so the space holds 120 canonical ids.
    """
    ids = []
    for a in OpKind:
        for b in OpKind:
            for c in OpKind:
                ids.append(Cell((fixed, fixed, fixed, a, b, c)).local_id)
    return SearchSpace(ids)


class Objective:
    """Maximisation target: canonical id -> finite value."""

    def __init__(self, values: Mapping[int, float], name: str = "objective", source_ids: Mapping[int, str] | None = None):
        vals = {}
        for k, v in values.items():
            v = float(v)
            if not math.isfinite(v):
                raise ValueError(f"objective {name!r} has a non-finite value for id {k}")
            vals[int(k)] = v
        self.values = vals
        self.name = name
        self.source_ids = dict(source_ids or {})

    def __call__(self, cid: int) -> float:
        try:
            return self.values[cid]
        except KeyError:
            raise KeyError(f"objective {self.name!r} has no value for canonical id {cid}") from None

    def space(self) -> SearchSpace:
        return SearchSpace(self.values)

    def optimum(self, space: SearchSpace | None = None) -> tuple[int, float]:
        ids = space.ids if space is not None else sorted(self.values)
        best = max(ids, key=lambda i: (self.values[i], -i))
        return best, self.values[best]

    @classmethod
    def from_store(cls, store, dataset: str, key: str, index: int | None = None, measurement: str = "accuracy") -> "Objective":
        """Values of one store column keyed by canonical id.

        Store ids are mapped to cells through the meta strings, so stores with
        their own id numbering work; the first id (in numeric order) of each
        class supplies the value.
        """
        from .datastore import ATTACK_KEYS, CORRUPTION_KEYS

        if index is None and (key in ATTACK_KEYS or key in CORRUPTION_KEYS):
            raise ValueError(f"key {key!r} needs an index")
        meta = store.meta(dataset)
        values, source = {}, {}
        for sid, v in store.values(dataset, key, measurement, index).items():
            if sid in meta.ids:
                cid = canonical_id(decode_arch_string(meta.ids[sid]["nb201-string"]))
            else:
                cid = canonical_id(int(sid))
            if cid not in values:
                values[cid] = v
                source[cid] = sid
        name = f"{key}@{index}" if index is not None else key
        return cls(values, name, source)

    @classmethod
    def mean_of(cls, objectives, name: str) -> "Objective":
        """Pointwise mean over the ids common to all ``objectives``."""
        common = set.intersection(*(set(o.values) for o in objectives))
        return cls({i: float(np.mean([o.values[i] for o in objectives])) for i in common}, name, objectives[0].source_ids)


# -- traces ------------------------------------------------------------------


class BudgetExhausted(Exception):
    pass


@dataclass
class SearchTrace:
    algorithm: str
    objective: str
    budget: int
    seed: int
    queries: list[tuple[int, float]] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def best(self) -> tuple[int, float]:
        if not self.queries:
            raise ValueError("empty trace")
        # first query reaching the maximum
        return max(self.queries, key=lambda q: q[1])

    def incumbents(self) -> list[float]:
        return list(np.maximum.accumulate([v for _, v in self.queries]))

    def check(self) -> None:
        """Budget, no-requery and incumbent invariants."""
        ids = [i for i, _ in self.queries]
        if len(ids) > self.budget:
            raise AssertionError(f"{len(ids)} queries exceed budget {self.budget}")
        if len(set(ids)) != len(ids):
            raise AssertionError("an architecture was queried twice")
        if self.queries and self.best[1] != max(v for _, v in self.queries):
            raise AssertionError("incumbent is not the best query")

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "objective": self.objective,
            "budget": self.budget,
            "seed": self.seed,
            "queries": [[i, v] for i, v in self.queries],
            "best": list(self.best) if self.queries else None,
        }


class _Session:
    def __init__(self, algorithm, objective: Objective, space: SearchSpace, budget: int, seed: int):
        if budget < 1:
            raise ValueError("budget must be at least 1")
        self.obj = objective
        self.space = space
        self.rng = np.random.default_rng(seed)
        self.trace = SearchTrace(algorithm, objective.name, budget, seed)
        self.cache: dict[int, float] = {}

    @property
    def left(self) -> int:
        return self.trace.budget - len(self.trace.queries)

    @property
    def exhausted(self) -> bool:
        return self.left <= 0 or len(self.cache) >= len(self.space)

    def query(self, cid: int) -> float:
        if cid in self.cache:
            return self.cache[cid]
        if self.left <= 0:
            raise BudgetExhausted
        v = self.obj(cid)
        self.cache[cid] = v
        self.trace.queries.append((cid, v))
        return v

    def fresh(self) -> int | None:
        """Uniformly random id not yet queried, or ``None``."""
        if len(self.cache) >= len(self.space):
            return None
        ids = self.space.ids
        if len(self.cache) < len(ids) // 2:
            while True:
                cid = ids[int(self.rng.integers(len(ids)))]
                if cid not in self.cache:
                    return cid
        rest = [i for i in ids if i not in self.cache]
        return rest[int(self.rng.integers(len(rest)))]


def _space(objective, space):
    space = space if space is not None else objective.space()
    missing = [i for i in space.ids if i not in objective.values]
    if missing:
        raise ValueError(f"objective {objective.name!r} lacks {len(missing)} ids of the space, e.g. {missing[:3]}")
    return space


# -- searchers ---------------------------------------------------------------


def random_search(objective: Objective, budget: int, seed: int = 0, space: SearchSpace | None = None) -> SearchTrace:
    """Uniform sampling without replacement."""
    space = _space(objective, space)
    s = _Session("random_search", objective, space, budget, seed)
    order = s.rng.permutation(len(space))
    for k in order[: budget]:
        s.query(space.ids[int(k)])
    return s.trace


def local_search(objective: Objective, budget: int, seed: int = 0, space: SearchSpace | None = None, restart: bool = True) -> SearchTrace:
    """Best-improvement hill climbing with random restarts.

    Each climb starts at a not yet queried random architecture, evaluates its
    whole neighbourhood and moves to the best strictly better neighbour (ties
    to the lowest id).  ``info["climbs"]`` lists the visited path of each
    climb and whether it ended in a local optimum.
    """
    space = _space(objective, space)
    s = _Session("local_search", objective, space, budget, seed)
    climbs = s.trace.info.setdefault("climbs", [])
    try:
        while not s.exhausted:
            cur = s.fresh()
            if cur is None:
                break
            path = {"path": [cur], "local_optimum": False}
            climbs.append(path)
            val = s.query(cur)
            while True:
                nb_vals = [(s.query(n), -n) for n in space.neighbors(cur)]
                better = [(v, -m) for v, m in nb_vals if v > val]
                if not better:
                    path["local_optimum"] = True
                    break
                val, cur = max(better, key=lambda t: (t[0], -t[1]))
                path["path"].append(cur)
            if not restart:
                break
    except BudgetExhausted:
        pass
    return s.trace


def _mutate_in_space(space: SearchSpace, cid: int, rng) -> tuple[int, int]:
    """Single-edge mutation landing on a different in-space class: (raw id, canonical id)."""
    cell = cell_from_id(cid)
    for _ in range(64):
        child = mutate(cell, rng)
        c = canonical_id(child)
        if c != cid and c in space:
            return child.local_id, c
    edits = space.edits(cid)
    if not edits:
        return cid, cid
    return edits[int(rng.integers(len(edits)))]


def regularized_evolution(
    objective: Objective, budget: int, seed: int = 0, space: SearchSpace | None = None, population: int = 30, sample: int = 10, retries: int = 20
) -> SearchTrace:
    """Aging evolution: tournament selection, one mutation, oldest evicted.

    ``info["lineage"]`` records ``(parent id, raw child local id, child id)``
    for every mutation.  The tournament winner is mutated up to ``retries``
    times looking for an unqueried child, then an unqueried single-edge edit
    is drawn directly; when the winner's whole neighbourhood is known a fresh
    random architecture joins instead (listed in ``info["immigrants"]``).
    """
    space = _space(objective, space)
    if budget <= population:
        raise ValueError("budget must exceed the population size")
    if not 1 <= sample <= population:
        raise ValueError("sample size must be in 1..population")
    s = _Session("regularized_evolution", objective, space, budget, seed)
    lineage = s.trace.info.setdefault("lineage", [])
    immigrants = s.trace.info.setdefault("immigrants", [])
    sizes = s.trace.info.setdefault("population_sizes", [])
    pop: list[tuple[int, float]] = []
    try:
        while len(pop) < population and not s.exhausted:
            cid = s.fresh()
            pop.append((cid, s.query(cid)))
        while not s.exhausted:
            picks = s.rng.choice(len(pop), size=min(sample, len(pop)), replace=False)
            parent = max((pop[int(k)] for k in picks), key=lambda t: (t[1], -t[0]))[0]
            child = None
            for _ in range(retries):
                raw, c = _mutate_in_space(space, parent, s.rng)
                if c not in s.cache:
                    child = c
                    break
            if child is None:
                open_edits = [e for e in space.edits(parent) if e[1] not in s.cache]
                if open_edits:
                    raw, child = open_edits[int(s.rng.integers(len(open_edits)))]
            if child is None:
                child = s.fresh()
                immigrants.append(child)
            else:
                lineage.append((parent, raw, child))
            pop.append((child, s.query(child)))
            pop.pop(0)
            sizes.append(len(pop))
    except BudgetExhausted:
        pass
    return s.trace


def featurize(cell_or_id) -> np.ndarray:
    """Concatenated one-hot operation vectors of the six edges (length 30)."""
    cell = cell_or_id if isinstance(cell_or_id, Cell) else cell_from_id(int(cell_or_id))
    out = np.zeros(NUM_EDGES * len(OpKind))
    for e, op in enumerate(cell.ops):
        out[e * len(OpKind) + int(op)] = 1.0
    return out


class MLPEnsemble:
    """Independently initialised two-hidden-layer ReLU regressors, trained jointly with Adam.

    Member weights are stacked along a leading axis; every member sees the
    same full batch and differs only in its initialisation.
    """

    def __init__(self, members=5, hidden=32, epochs=200, lr=0.01, seed=0):
        self.members, self.hidden, self.epochs, self.lr = members, hidden, epochs, lr
        self.seed = seed
        self.params = None

    def fit(self, X, y):
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        self.mu, self.sd = y.mean(), y.std() or 1.0
        t = (y - self.mu) / self.sd
        rng = np.random.default_rng(self.seed)
        k, d, h = self.members, X.shape[1], self.hidden
        p = [
            rng.normal(size=(k, d, h)) * np.sqrt(2 / d),
            np.zeros((k, 1, h)),
            rng.normal(size=(k, h, h)) * np.sqrt(2 / h),
            np.zeros((k, 1, h)),
            rng.normal(size=(k, h, 1)) * np.sqrt(1 / h),
            np.zeros((k, 1, 1)),
        ]
        m = [np.zeros_like(a) for a in p]
        v = [np.zeros_like(a) for a in p]
        b1, b2 = 0.9, 0.999
        n = len(X)
        for step in range(1, self.epochs + 1):
            a1 = X @ p[0] + p[1]
            h1 = np.maximum(a1, 0)
            a2 = h1 @ p[2] + p[3]
            h2 = np.maximum(a2, 0)
            out = h2 @ p[4] + p[5]
            g = (2 / n) * (out - t[:, None])
            gh2 = (g @ p[4].transpose(0, 2, 1)) * (a2 > 0)
            gh1 = (gh2 @ p[2].transpose(0, 2, 1)) * (a1 > 0)
            grads = (
                X.T @ gh1,
                gh1.sum(1, keepdims=True),
                h1.transpose(0, 2, 1) @ gh2,
                gh2.sum(1, keepdims=True),
                h2.transpose(0, 2, 1) @ g,
                g.sum(1, keepdims=True),
            )
            c1, c2 = 1 - b1**step, 1 - b2**step
            for j, gj in enumerate(grads):
                m[j] = b1 * m[j] + (1 - b1) * gj
                v[j] = b2 * v[j] + (1 - b2) * gj * gj
                p[j] = p[j] - self.lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + 1e-8)
        self.params = p
        return self

    def predict_all(self, X) -> np.ndarray:
        """Predictions of every member, shape ``(members, len(X))``."""
        p = self.params
        X = np.asarray(X, float)
        h1 = np.maximum(X @ p[0] + p[1], 0)
        h2 = np.maximum(h1 @ p[2] + p[3], 0)
        return (h2 @ p[4] + p[5])[:, :, 0] * self.sd + self.mu

    def predict(self, X) -> np.ndarray:
        return self.predict_all(X).mean(axis=0)


def bananas_lite(
    objective: Objective,
    budget: int,
    seed: int = 0,
    space: SearchSpace | None = None,
    ensemble: int = 5,
    candidates: int = 100,
    warmup: int = 10,
    top: int = 10,
    hidden: int = 32,
    epochs: int = 200,
    lr: float = 0.01,
) -> SearchTrace:
    """Predictor-guided search with an MLP ensemble and Thompson-style acquisition.

    After ``warmup`` random queries, each step refits the ensemble on all
    queried (one-hot encoding, value) pairs, proposes up to ``candidates``
    unqueried architectures by one or two mutations of the ``top`` best
    queried ones (topped up with random ones), scores every candidate with one
    randomly drawn ensemble member and queries the highest score.
    """
    space = _space(objective, space)
    if budget <= warmup:
        raise ValueError("budget must exceed the warm-up size")
    s = _Session("bananas_lite", objective, space, budget, seed)
    try:
        while len(s.trace.queries) < warmup and not s.exhausted:
            s.query(s.fresh())
        step = 0
        while not s.exhausted:
            ids = [i for i, _ in s.trace.queries]
            vals = [v for _, v in s.trace.queries]
            model = MLPEnsemble(ensemble, hidden, epochs, lr, seed=seed * 100003 + step).fit([featurize(i) for i in ids], vals)
            ranked = [i for i, _ in sorted(s.trace.queries, key=lambda q: (-q[1], q[0]))[:top]]
            pool: list[int] = []
            seen = set(s.cache)
            for _ in range(candidates * 10):
                if len(pool) >= candidates:
                    break
                cid = ranked[int(s.rng.integers(len(ranked)))]
                for _ in range(1 + int(s.rng.integers(2))):
                    cid = _mutate_in_space(space, cid, s.rng)[1]
                if cid not in seen:
                    seen.add(cid)
                    pool.append(cid)
            while len(pool) < candidates and len(seen) < len(space):
                cid = space.ids[int(s.rng.integers(len(space)))]
                if cid not in seen:
                    seen.add(cid)
                    pool.append(cid)
            if not pool:
                break
            preds = model.predict_all([featurize(i) for i in pool])
            draw = s.rng.integers(ensemble, size=len(pool))
            score = preds[draw, np.arange(len(pool))]
            s.query(pool[int(np.argmax(score))])
            step += 1
    except BudgetExhausted:
        pass
    return s.trace


SEARCHERS: dict[str, Callable[..., SearchTrace]] = {
    "random_search": random_search,
    "local_search": local_search,
    "regularized_evolution": regularized_evolution,
    "bananas_lite": bananas_lite,
}


# -- benchmark ---------------------------------------------------------------


def benchmark_protocol(
    objectives: Mapping[str, Objective],
    algorithms=tuple(SEARCHERS),
    runs: int = 100,
    budget: int = 300,
    seed: int = 0,
    columns: Mapping[str, Objective] | None = None,
    space: SearchSpace | None = None,
    settings: Mapping[str, dict] | None = None,
) -> dict:
    """Search each objective with each algorithm and cross-evaluate the finds.

    Run ``r`` uses seed ``seed + r``.  A report row holds the mean and standard
    deviation of the searched value of the best architecture found, and the
    mean of every ``columns`` objective at that architecture.
    """
    columns = dict(columns or objectives)
    rows, traces = [], {}
    for oname, obj in objectives.items():
        sp = space if space is not None else obj.space()
        for alg in algorithms:
            fn = SEARCHERS[alg]
            kw = dict((settings or {}).get(alg, {}))
            found = []
            for r in range(runs):
                tr = fn(obj, budget, seed + r, space=sp, **kw)
                tr.check()
                found.append(tr.best)
                traces.setdefault((oname, alg), []).append(tr)
            vals = np.array([v for _, v in found])
            row = {"algorithm": alg, "objective": oname, "runs": runs, "budget": budget, "mean": float(vals.mean()), "std": float(vals.std())}
            for cname, col in columns.items():
                row[cname] = float(np.mean([col(i) for i, _ in found]))
            rows.append(row)
    optimum = {cname: col.optimum(space)[1] if space is not None else col.optimum()[1] for cname, col in columns.items()}
    return {"rows": rows, "optimum": optimum, "columns": list(columns), "traces": traces}


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["algorithm", "objective", "runs", "budget", "mean", "std"] + report["columns"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerow(["optimum", "", "", "", "", ""] + [repr(report["optimum"][c]) for c in report["columns"]])
    for row in report["rows"]:
        w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in cols])
    return buf.getvalue()


def report_json(report: dict) -> str:
    body = {"columns": report["columns"], "optimum": report["optimum"], "rows": report["rows"]}
    return json.dumps(body, indent=1)

