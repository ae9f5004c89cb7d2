"""Rank correlations, order statistics and slice/neighbourhood views of a store.

Series are mappings ``id -> value``; functions that read a store take the
dataset name and return such mappings keyed by store id.  A metric is named
by a string:

``clean``, ``<key>@<index>`` (one epsilon or severity of an attack or
corruption), ``mean_adversarial`` (every attack and epsilon) and
``mean_corruption`` (every corruption and severity).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .cellspace import canonical_id, conv_counts, decode_arch_string, kernel_param_count, neighbors
from .datastore import ATTACK_KEYS, CONFIDENCE_SCHEMES, CORRUPTION_KEYS, RobustnessRecord

__all__ = [
    "kendall_tau",
    "correlation_matrix",
    "SummaryStats",
    "summarize",
    "metric_values",
    "mean_adversarial_accuracy",
    "mean_corruption_accuracy",
    "slice_ids",
    "top_k",
    "neighbor_delta",
    "aggregate_confidence",
    "aggregate_cm",
    "write_csv",
    "write_json",
    "manifest",
]


# -- correlation -------------------------------------------------------------


def _paired(a, b):
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        common = sorted(set(a) & set(b), key=str)
        return np.array([a[k] for k in common], float), np.array([b[k] for k in common], float)
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    return a, b


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau (tau-b) over the ids common to both series."""
    x, y = _paired(a, b)
    if len(x) < 2:
        raise ValueError("need at least two common ids")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("kendall tau is undefined for a constant series")
    return float(stats.kendalltau(x, y, variant="b").statistic)


def correlation_matrix(series: Sequence) -> np.ndarray:
    """Symmetric matrix of pairwise ``kendall_tau`` with a unit diagonal."""
    n = len(series)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = kendall_tau(series[i], series[j])
    return out


# -- summaries ---------------------------------------------------------------


@dataclass(frozen=True)
class SummaryStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    count: int
    guessing_baseline: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(series, num_classes: int | None = None) -> SummaryStats:
    """Order statistics with linearly interpolated quartiles."""
    vals = np.asarray(list(series.values()) if isinstance(series, Mapping) else series, float)
    if vals.size == 0:
        raise ValueError("cannot summarize an empty series")
    q = np.percentile(vals, [0, 25, 50, 75, 100], method="linear")
    return SummaryStats(*map(float, q), float(vals.mean()), int(vals.size), None if num_classes is None else 1.0 / num_classes)


# -- store metrics -----------------------------------------------------------


def _column(store, dataset, key, index):
    table = store.values(dataset, key, "accuracy")
    if key == "clean":
        return {i: float(v) for i, v in table.items()}
    return {i: float(v[index]) for i, v in table.items()}


def _attack_columns(store, dataset, include_fgsm_255):
    cols = []
    for key in ATTACK_KEYS:
        if not store.has(dataset, key, "accuracy"):
            continue
        eps = store.epsilons(key, dataset)
        for k, e in enumerate(eps):
            if key == "fgsm" and not include_fgsm_255 and float(e) == 255.0:
                continue
            cols.append((key, k))
    return cols


def _mean_columns(store, dataset, cols, what):
    if not cols:
        raise KeyError(f"no {what} records in dataset {dataset!r}")
    tables = {key: store.values(dataset, key, "accuracy") for key in {k for k, _ in cols}}
    ids = set.intersection(*(set(t) for t in tables.values()))
    missing = {key: sorted(set().union(*(set(t) for t in tables.values())) - set(t), key=int) for key, t in tables.items()}
    missing = {k: v for k, v in missing.items() if v}
    if missing:
        raise KeyError(f"records missing for {what}: " + "; ".join(f"{k}: ids {v[:5]}" for k, v in missing.items()))
    return {i: float(np.mean([tables[k][i][j] for k, j in cols])) for i in ids}


def mean_adversarial_table(store, dataset: str, include_fgsm_255: bool = True) -> dict[str, float]:
    """Unweighted mean accuracy over every stored (attack, epsilon) pair, per id."""
    return _mean_columns(store, dataset, _attack_columns(store, dataset, include_fgsm_255), "attacks")


def mean_corruption_table(store, dataset: str) -> dict[str, float]:
    """Unweighted mean accuracy over every stored (corruption, severity) pair, per id."""
    cols = []
    for key in CORRUPTION_KEYS:
        if store.has(dataset, key, "accuracy"):
            n = len(next(iter(store.values(dataset, key, "accuracy").values())))
            cols.extend((key, s) for s in range(n))
    return _mean_columns(store, dataset, cols, "corruptions")


def mean_adversarial_accuracy(store, dataset: str, arch_id, include_fgsm_255: bool = True) -> float:
    cols = _attack_columns(store, dataset, include_fgsm_255)
    if not cols:
        raise KeyError(f"no attack records in dataset {dataset!r}")
    return _mean_for_id(store, dataset, arch_id, cols)


def mean_corruption_accuracy(store, dataset: str, arch_id) -> float:
    cols = []
    for key in CORRUPTION_KEYS:
        if store.has(dataset, key, "accuracy"):
            v = store.query(dataset, key, "accuracy", arch_id)
            cols.extend((key, s) for s in range(len(v)))
    if not cols:
        raise KeyError(f"no corruption records in dataset {dataset!r}")
    return _mean_for_id(store, dataset, arch_id, cols)


def _mean_for_id(store, dataset, arch_id, cols):
    vals, missing = [], []
    for key, k in cols:
        try:
            vals.append(float(store.query(dataset, key, "accuracy", arch_id, k)))
        except KeyError:
            missing.append(key)
    if missing:
        raise KeyError(f"id {arch_id}: missing records for {sorted(set(missing))}")
    return float(np.mean(vals))


def metric_values(store, dataset: str, metric: str, include_fgsm_255: bool = True) -> dict[str, float]:
    """Values of a named metric for every stored id."""
    if metric == "mean_adversarial":
        return mean_adversarial_table(store, dataset, include_fgsm_255)
    if metric == "mean_corruption":
        return mean_corruption_table(store, dataset)
    if metric == "clean":
        return _column(store, dataset, "clean", None)
    key, sep, idx = metric.rpartition("@")
    if not sep or not idx.lstrip("-").isdigit():
        raise ValueError(f"metric {metric!r} is not 'clean', 'mean_adversarial', 'mean_corruption' or '<key>@<index>'")
    return _column(store, dataset, key, int(idx))


# -- slices and neighbourhoods ------------------------------------------------


def _cell_of(store, dataset, sid):
    meta = store.meta(dataset)
    if sid in meta.ids:
        return decode_arch_string(meta.ids[sid]["nb201-string"])
    from .cellspace import cell_from_id

    return cell_from_id(int(sid))


def slice_ids(store, dataset: str, ids: Iterable[str], kernel_params: int | None = None, conv1x1: int | None = None) -> list[str]:
    """Ids whose cell matches the kernel-parameter and 1x1-count filter."""
    out = []
    for sid in ids:
        cell = _cell_of(store, dataset, sid)
        if kernel_params is not None and kernel_param_count(cell) != kernel_params:
            continue
        if conv1x1 is not None and conv_counts(cell)[0] != conv1x1:
            continue
        out.append(sid)
    return out


def top_k(values: Mapping[str, float], k: int, ids: Iterable[str] | None = None) -> list[tuple[str, float]]:
    """The ``k`` highest values (restricted to ``ids``), ties to the lowest id."""
    pool = list(values) if ids is None else [i for i in ids if i in values]
    if k > len(pool):
        raise ValueError(f"filter selects {len(pool)} architectures, fewer than k={k}")
    ranked = sorted(pool, key=lambda i: (-values[i], int(i) if str(i).isdigit() else 0, str(i)))
    return [(i, values[i]) for i in ranked[:k]]


def neighbor_delta(store, dataset: str, arch_id, metric: str = "mean_adversarial", include_fgsm_255: bool = True) -> list[dict]:
    """Clean and metric differences to every edit-distance-1 neighbour class.

    Neighbours are the 24 single-edge edits of the architecture's cell,
    merged by isomorphism class; each row lists the edits ``(edge, old, new)``
    (1-based edge numbers) that lead to it.
    """
    arch_id = str(arch_id)
    clean = metric_values(store, dataset, "clean")
    target = metric_values(store, dataset, metric, include_fgsm_255)
    by_class = {}
    for sid in sorted(clean, key=int):
        by_class.setdefault(canonical_id(_cell_of(store, dataset, sid)), sid)
    base_cell = _cell_of(store, dataset, arch_id)
    base = by_class.get(canonical_id(base_cell), arch_id)
    if base not in clean or base not in target:
        raise KeyError(f"no records for id {arch_id}")
    rows: dict[int, dict] = {}
    missing = []
    for nb in neighbors(base_cell):
        edge = next(e for e in range(6) if nb.ops[e] != base_cell.ops[e])
        cid = canonical_id(nb)
        sid = by_class.get(cid)
        if sid is None or sid not in target:
            missing.append(nb.to_string())
            continue
        row = rows.setdefault(cid, {"id": sid, "edits": [], "delta_clean": clean[sid] - clean[base], "delta_metric": target[sid] - target[base]})
        row["edits"].append((edge + 1, base_cell.ops[edge].token, nb.ops[edge].token))
    if missing:
        raise KeyError(f"neighbour records missing for {len(missing)} edits, e.g. {missing[0]}")
    return sorted(rows.values(), key=lambda r: int(r["id"]))


# -- aggregation -------------------------------------------------------------


def aggregate_confidence(records: Sequence[RobustnessRecord], scheme: str, index: int = 0) -> np.ndarray:
    """Elementwise mean of one confidence scheme over architectures."""
    if scheme not in CONFIDENCE_SCHEMES:
        raise ValueError(f"unknown confidence scheme {scheme!r}")
    mats = [np.asarray(r.confidence[index][scheme], float) for r in records]
    if not mats:
        raise ValueError("no records")
    if len({m.shape for m in mats}) != 1:
        raise ValueError(f"confidence shapes differ: {sorted({m.shape for m in mats})}")
    return np.mean(mats, axis=0)


def aggregate_cm(records: Sequence[RobustnessRecord], index: int = 0) -> np.ndarray:
    """Sum of confusion matrices over architectures."""
    mats = [np.asarray(r.cm[index]) for r in records]
    if not mats:
        raise ValueError("no records")
    if len({m.shape for m in mats}) != 1:
        raise ValueError(f"confusion matrix shapes differ: {sorted({m.shape for m in mats})}")
    return np.sum(mats, axis=0)


# -- export ------------------------------------------------------------------


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=1, sort_keys=False, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
    path.write_text(text + "\n", encoding="utf-8")
    return path


def manifest(source, keys: Iterable[str], outputs: Iterable[str] = (), **extra) -> dict:
    """Small provenance record: source store, metrics used, toolkit version."""
    return {"toolkit": "archrobust", "version": __version__, "source": str(source), "keys": list(keys), "outputs": sorted(map(str, outputs)), **extra}
