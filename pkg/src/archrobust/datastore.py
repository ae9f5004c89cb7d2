"""Reader, writer and query layer for the robustness dataset file layout.

On disk a store is ``<root>/<dataset>/{key}_{measurement}.json`` plus a
``meta.json`` either inside the dataset folder or at the root.  Each payload
file nests ``{dataset: {key: {measurement: {id: value}}}}``.  ``clean``
entries are single values; attack and corruption entries are lists with one
element per epsilon or severity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "ATTACK_KEYS",
    "CORRUPTION_KEYS",
    "EVAL_KEYS",
    "MEASUREMENTS",
    "PUBLISHED_DATASETS",
    "EPSILON_NUMERATORS",
    "SEVERITIES",
    "SchemaError",
    "UnknownIdError",
    "RobustnessRecord",
    "MetaRecord",
    "DatasetStore",
    "file_name",
    "parse_file_name",
    "dumps",
    "write_dataset",
    "read_dataset",
    "desk_meta",
]

ATTACK_KEYS = ("fgsm", "pgd", "aa_apgd-ce", "aa_square")
CORRUPTION_KEYS = (
    "brightness",
    "contrast",
    "defocus_blur",
    "elastic_transform",
    "fog",
    "frost",
    "gaussian_noise",
    "glass_blur",
    "impulse_noise",
    "jpeg_compression",
    "motion_blur",
    "pixelate",
    "shot_noise",
    "snow",
    "zoom_blur",
)
EVAL_KEYS = ("clean",) + ATTACK_KEYS + CORRUPTION_KEYS
MEASUREMENTS = ("accuracy", "confidence", "cm")
PUBLISHED_DATASETS = ("cifar10", "cifar100", "ImageNet16-120")
SEVERITIES = 5
CONFIDENCE_SCHEMES = ("label", "argmax", "prediction")

_PGD_LIKE = (0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0)
# epsilon values as written in meta.json, i.e. multiples of 1/255
EPSILON_NUMERATORS = {
    "fgsm": (0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 255.0),
    "pgd": _PGD_LIKE,
    "aa_apgd-ce": _PGD_LIKE,
    "aa_square": _PGD_LIKE,
}


class SchemaError(ValueError):
    """A file or payload that does not follow the dataset layout."""

    def __init__(self, message, file=None, path=()):
        where = ""
        if file is not None:
            where = f"{file}"
            if path:
                where += ":" + "/".join(str(p) for p in path)
            where += ": "
        super().__init__(where + message)
        self.file, self.path = file, tuple(path)


class UnknownIdError(KeyError):
    pass


def file_name(key: str, measurement: str) -> str:
    if key not in EVAL_KEYS:
        raise SchemaError(f"unknown evaluation key {key!r}")
    if measurement not in MEASUREMENTS:
        raise SchemaError(f"unknown measurement {measurement!r}")
    return f"{key}_{measurement}.json"


def parse_file_name(name: str) -> tuple[str, str]:
    """Split ``{key}_{measurement}.json``; anything else is a schema error."""
    if not name.endswith(".json"):
        raise SchemaError(f"not a json file: {name!r}")
    key, sep, measurement = name[: -len(".json")].rpartition("_")
    if not sep or key not in EVAL_KEYS or measurement not in MEASUREMENTS:
        raise SchemaError(f"file name {name!r} is not '{{key}}_{{measurement}}.json' with a known key and measurement")
    return key, measurement


def dumps(obj) -> str:
    """Deterministic JSON: shortest round-trip floats, caller-given key order."""
    return json.dumps(_plain(obj), ensure_ascii=False, allow_nan=False, separators=(",", ":"))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _id_order(ids: Iterable[str]) -> list[str]:
    return sorted(ids, key=lambda s: (0, int(s), "") if s.isdigit() else (1, 0, s))


# -- records -----------------------------------------------------------------


@dataclass
class RobustnessRecord:
    """Accuracy, confidences and confusion matrices of one (arch, key).

    ``levels`` holds the epsilon numerators or severities the list entries
    refer to; for ``clean`` it is empty and every list has one element.
    """

    key: str
    accuracy: list[float]
    confidence: list[dict]
    cm: list[np.ndarray]
    levels: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.key not in EVAL_KEYS:
            raise SchemaError(f"unknown evaluation key {self.key!r}")
        n = len(self.accuracy)
        if len(self.confidence) != n or len(self.cm) != n:
            raise ValueError("accuracy, confidence and cm must have the same length")
        if self.key == "clean" and n != 1:
            raise ValueError("a clean record holds exactly one entry")
        self.cm = [np.asarray(m, dtype=np.int64) for m in self.cm]
        self.confidence = [
            {
                "label": np.asarray(c["label"], dtype=float),
                "argmax": np.asarray(c["argmax"], dtype=float),
                "prediction": np.asarray(c["prediction"], dtype=float),
            }
            for c in self.confidence
        ]

    @property
    def is_scalar(self) -> bool:
        return self.key == "clean"

    def __len__(self):
        return len(self.accuracy)

    def payload(self, measurement: str):
        """JSON-ready value for one measurement file."""
        if measurement == "accuracy":
            vals = [float(a) for a in self.accuracy]
        elif measurement == "confidence":
            vals = [{s: c[s].tolist() for s in CONFIDENCE_SCHEMES} for c in self.confidence]
        elif measurement == "cm":
            vals = [m.tolist() for m in self.cm]
        else:
            raise SchemaError(f"unknown measurement {measurement!r}")
        return vals[0] if self.is_scalar else vals

    def to_json(self) -> dict:
        """Lossless JSON form: every measurement as a list, plus the levels."""
        out = {m: self.payload(m) for m in MEASUREMENTS}
        if self.is_scalar:
            out = {m: [v] for m, v in out.items()}
        return {"key": self.key, **out, "levels": [float(v) for v in self.levels]}

    @classmethod
    def from_json(cls, d: dict) -> "RobustnessRecord":
        return cls(d["key"], d["accuracy"], d["confidence"], d["cm"], d.get("levels", []))

    def check(self, atol=1e-12) -> None:
        """Assert the bookkeeping identities; raises ``ValueError``."""
        totals = {int(m.sum()) for m in self.cm}
        if len(totals) > 1:
            raise ValueError(f"{self.key}: confusion matrices have different totals {sorted(totals)}")
        for i, (a, m, c) in enumerate(zip(self.accuracy, self.cm, self.confidence)):
            if np.any(m < 0):
                raise ValueError(f"{self.key}[{i}]: negative confusion count")
            total = m.sum()
            if not 0 <= a <= 1 or abs(a - np.trace(m) / total) > atol:
                raise ValueError(f"{self.key}[{i}]: accuracy {a} != trace/total {np.trace(m) / total}")
            for s in CONFIDENCE_SCHEMES:
                if np.any(c[s] < -atol) or np.any(c[s] > 1 + atol):
                    raise ValueError(f"{self.key}[{i}]: {s} confidence outside [0, 1]")
            rows = c["label"].sum(axis=1)
            present = m.sum(axis=1) > 0
            if np.any(np.abs(rows[present] - 1) > 1e-9):
                raise ValueError(f"{self.key}[{i}]: label confidence rows do not sum to one")


# -- meta --------------------------------------------------------------------


@dataclass
class MetaRecord:
    ids: dict[str, dict]
    epsilons: dict[str, list[float]]
    extra: dict = field(default_factory=dict)

    def resolve(self, arch_id) -> str:
        arch_id = str(arch_id)
        try:
            return str(self.ids[arch_id]["isomorph"])
        except KeyError:
            raise UnknownIdError(arch_id) from None

    def validate(self, file=None) -> None:
        for i, entry in self.ids.items():
            if "nb201-string" not in entry or "isomorph" not in entry:
                raise SchemaError("entry needs 'nb201-string' and 'isomorph'", file, ("ids", i))
            target = str(entry["isomorph"])
            if target not in self.ids:
                raise SchemaError(f"isomorph target {target} is not listed", file, ("ids", i))
            if str(self.ids[target]["isomorph"]) != target:
                raise SchemaError(f"isomorph target {target} does not point to itself", file, ("ids", i))
        for k, v in self.epsilons.items():
            if k not in ATTACK_KEYS:
                raise SchemaError(f"epsilon list for unknown attack {k!r}", file, ("epsilons", k))
            if not isinstance(v, list) or not all(isinstance(e, (int, float)) for e in v):
                raise SchemaError("epsilon list must be a list of numbers", file, ("epsilons", k))

    def to_json(self) -> dict:
        out = {
            "ids": {i: {"nb201-string": self.ids[i]["nb201-string"], "isomorph": str(self.ids[i]["isomorph"])} for i in _id_order(self.ids)},
            "epsilons": {k: [float(e) for e in self.epsilons[k]] for k in sorted(self.epsilons)},
        }
        if self.extra:
            out["toolkit"] = self.extra
        return out

    @classmethod
    def from_json(cls, d: dict, file=None) -> "MetaRecord":
        if not isinstance(d, dict) or "ids" not in d:
            raise SchemaError("meta.json needs an 'ids' block", file)
        ids = {str(k): dict(v) for k, v in d["ids"].items()}
        meta = cls(ids, {k: list(v) for k, v in d.get("epsilons", {}).items()}, dict(d.get("toolkit", {})))
        meta.validate(file)
        return meta


def desk_meta(epsilons: Mapping[str, Iterable[float]] | None = None, extra: dict | None = None) -> MetaRecord:
    """Meta block for toolkit stores: every local id, isomorph = class representative."""
    from .cellspace import canonical_id, cell_from_id, encode_arch_string, SPACE_SIZE

    ids = {str(i): {"nb201-string": encode_arch_string(cell_from_id(i)), "isomorph": str(canonical_id(i))} for i in range(SPACE_SIZE)}
    eps = {k: list(v) for k, v in (epsilons or EPSILON_NUMERATORS).items()}
    return MetaRecord(ids, eps, dict(extra or {}))


# -- writing -----------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(root, dataset: str, meta: MetaRecord, records: Mapping[str, Mapping[str, RobustnessRecord]], meta_at_root=False) -> list[Path]:
    """Write ``records[arch_id][key]`` plus ``meta.json``; returns written paths.

    Every attack record must have one entry per epsilon listed in ``meta``,
    every corruption record one per severity.
    """
    root = Path(root)
    folder = root / dataset
    folder.mkdir(parents=True, exist_ok=True)
    meta.validate()
    by_key: dict[str, dict[str, RobustnessRecord]] = {}
    for arch_id, recs in records.items():
        for key, rec in recs.items():
            if rec.key != key:
                raise SchemaError(f"record for {key!r} carries key {rec.key!r}")
            _check_length(meta, rec, arch_id)
            by_key.setdefault(key, {})[str(arch_id)] = rec
    written = []
    meta_path = (root if meta_at_root else folder) / "meta.json"
    _write_text(meta_path, dumps(meta.to_json()))
    written.append(meta_path)
    for key in EVAL_KEYS:
        if key not in by_key:
            continue
        table = by_key[key]
        for m in MEASUREMENTS:
            body = {i: table[i].payload(m) for i in _id_order(table)}
            path = folder / file_name(key, m)
            _write_text(path, dumps({dataset: {key: {m: body}}}))
            written.append(path)
    return written


def _check_length(meta, rec, arch_id):
    if rec.key in ATTACK_KEYS:
        if rec.key not in meta.epsilons:
            raise SchemaError(f"meta has no epsilon list for {rec.key!r}")
        want = len(meta.epsilons[rec.key])
    elif rec.key in CORRUPTION_KEYS:
        want = SEVERITIES
    else:
        want = 1
    if len(rec) != want:
        raise SchemaError(f"{rec.key} record of id {arch_id} has {len(rec)} entries, expected {want}")


# -- reading -----------------------------------------------------------------


class DatasetStore:
    """Lazily loaded view of a store directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"store root {self.root} does not exist")
        self._files: dict[tuple[str, str, str], Path] = {}
        self._tables: dict[tuple[str, str, str], dict] = {}
        self._meta: dict[str, MetaRecord] = {}
        root_meta = self.root / "meta.json"
        self._root_meta = self._load_meta(root_meta) if root_meta.is_file() else None
        # folders starting with "_" or "." hold caches, not datasets
        for sub in sorted(p for p in self.root.iterdir() if p.is_dir() and not p.name.startswith(("_", "."))):
            jsons = sorted(sub.glob("*.json"))
            if not jsons:
                continue
            for f in jsons:
                if f.name == "meta.json":
                    self._meta[sub.name] = self._load_meta(f)
                    continue
                try:
                    key, m = parse_file_name(f.name)
                except SchemaError as exc:
                    raise SchemaError(str(exc), f) from None
                self._files[(sub.name, key, m)] = f
        if self._root_meta is None and not self._meta:
            raise FileNotFoundError(f"no meta.json under {self.root}")
        for ds, _, _ in self._files:
            if ds not in self._meta and self._root_meta is None:
                raise SchemaError("dataset folder without meta.json and no root meta.json", self.root / ds)

    @staticmethod
    def _load_meta(path) -> MetaRecord:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON ({exc})", path) from None
        return MetaRecord.from_json(data, path)

    # -- structure --

    @property
    def datasets(self) -> list[str]:
        return sorted({d for d, _, _ in self._files} | set(self._meta))

    def meta(self, dataset: str | None = None) -> MetaRecord:
        if dataset is not None and dataset in self._meta:
            return self._meta[dataset]
        if self._root_meta is not None:
            return self._root_meta
        if dataset is None and len(self._meta) == 1:
            return next(iter(self._meta.values()))
        raise KeyError(f"no meta.json for dataset {dataset!r}")

    def keys(self, dataset: str) -> list[str]:
        present = {k for d, k, _ in self._files if d == dataset}
        return [k for k in EVAL_KEYS if k in present]

    def has(self, dataset, key, measurement) -> bool:
        return (dataset, key, measurement) in self._files

    def epsilons(self, key: str, dataset: str | None = None) -> list[float]:
        """Epsilon list of ``key`` exactly as stored (numerators of 1/255)."""
        if key == "clean":
            return []
        eps = self.meta(dataset).epsilons
        if key not in eps:
            raise KeyError(f"no epsilon list for key {key!r}")
        return list(eps[key])

    def table(self, dataset: str, key: str, measurement: str) -> dict:
        k = (dataset, key, measurement)
        if k not in self._tables:
            if k not in self._files:
                raise KeyError(f"no {file_name(key, measurement)} for dataset {dataset!r}")
            self._tables[k] = self._load_table(*k)
        return self._tables[k]

    def _load_table(self, dataset, key, measurement) -> dict:
        path = self._files[(dataset, key, measurement)]
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON ({exc})", path) from None
        for level, name in ((0, dataset), (1, key), (2, measurement)):
            if not isinstance(data, dict) or list(data) != [name]:
                got = list(data) if isinstance(data, dict) else type(data).__name__
                raise SchemaError(f"expected single key {name!r}, got {got}", path, [dataset, key, measurement][:level])
            data = data[name]
        if not isinstance(data, dict):
            raise SchemaError("expected a mapping id -> value", path, (dataset, key, measurement))
        return data

    # -- queries --

    def ids(self, dataset: str, key: str = "clean", measurement: str = "accuracy") -> list[str]:
        return _id_order(self.table(dataset, key, measurement))

    def resolve(self, arch_id, dataset: str | None = None) -> str:
        meta = self.meta(dataset)
        arch_id = str(arch_id)
        if arch_id not in meta.ids:
            raise UnknownIdError(arch_id)
        return meta.resolve(arch_id)

    def query(self, dataset: str, key: str, measurement: str, arch_id, index: int | None = None):
        table = self.table(dataset, key, measurement)
        arch_id = str(arch_id)
        if arch_id in self.meta(dataset).ids:
            rid = self.resolve(arch_id, dataset)
            if rid not in table and arch_id in table:
                rid = arch_id
        else:
            rid = arch_id
        if rid not in table:
            raise UnknownIdError(f"id {arch_id} not in {key}_{measurement} of {dataset}")
        value = table[rid]
        if index is None:
            return value
        if key == "clean":
            if index != 0:
                raise IndexError(f"clean entries have a single value, got index {index}")
            return value
        if not isinstance(value, list) or not -len(value) <= index < len(value):
            raise IndexError(f"index {index} out of range for {key} (length {len(value) if isinstance(value, list) else 1})")
        return value[index]

    def record(self, dataset: str, key: str, arch_id) -> RobustnessRecord:
        vals = {m: self.query(dataset, key, m, arch_id) for m in MEASUREMENTS}
        if key == "clean":
            vals = {m: [v] for m, v in vals.items()}
        levels = self.epsilons(key, dataset) if key in ATTACK_KEYS else list(range(1, len(vals["accuracy"]) + 1)) if key != "clean" else []
        return RobustnessRecord(key, vals["accuracy"], vals["confidence"], vals["cm"], levels)

    def values(self, dataset: str, key: str, measurement: str = "accuracy", index: int | None = None) -> dict[str, object]:
        """All stored ids mapped to their value (at ``index`` for list entries)."""
        table = self.table(dataset, key, measurement)
        if index is None or key == "clean":
            return {i: table[i] for i in _id_order(table)}
        return {i: table[i][index] for i in _id_order(table)}

    def best(self, dataset: str, key: str, measurement: str = "accuracy", index: int | None = None) -> tuple[str, float]:
        """Arg-max id and value; ties go to the lowest id."""
        vals = self.values(dataset, key, measurement, index)
        if not vals:
            raise ValueError(f"no entries for {key}_{measurement}")
        best_id = max(vals, key=lambda i: (vals[i], -int(i) if i.isdigit() else 0))
        return best_id, vals[best_id]

    def id_of_string(self, arch_string: str, dataset: str | None = None) -> str:
        meta = self.meta(dataset)
        if not hasattr(meta, "_by_string"):
            meta._by_string = {e["nb201-string"]: i for i, e in meta.ids.items()}
        try:
            return meta._by_string[arch_string]
        except KeyError:
            raise UnknownIdError(arch_string) from None

    def validate(self) -> None:
        """Load every file and check shapes and record identities."""
        for (ds, key, m) in sorted(self._files):
            self.table(ds, key, m)
        for ds in self.datasets:
            for key in self.keys(ds):
                if not all(self.has(ds, key, m) for m in MEASUREMENTS):
                    continue
                for i in self.ids(ds, key, "accuracy"):
                    try:
                        self.record(ds, key, i).check(atol=1e-9)
                    except ValueError as exc:
                        raise SchemaError(str(exc), self._files[(ds, key, "accuracy")], (ds, key, i)) from None


def read_dataset(root) -> DatasetStore:
    return DatasetStore(root)
