"""Command-line entry point: ``archrobust <command> [options]``.

Commands
--------
enumerate       space statistics (counts, classes, parameter slices)
build-dataset   train, attack and corrupt selected architectures into a store
measure         Jacobian / Hessian measures of selected architectures
search          run the searchers on store objectives and emit a report
analyze         correlations, summaries, top-k slices, neighbours, aggregates
query           read single values from a store

Settings come from built-in defaults, then ``--config FILE`` (JSON), then
``--set section.key=JSON`` overrides and the dedicated flags.  The store root
is ``--store``, else ``$ARCHROBUST_STORE``, else the config value.  Outputs
carry no timestamps, so identical settings give byte-identical files.

Exit codes: 0 success, 1 runtime error, 2 bad configuration or input,
3 some architectures failed (store written without them), 4 run stopped
early by ``--stop-after`` (resume by running again).  Errors are reported as
one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import multiprocessing
import os
import sys
import traceback
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as AN
from . import search as SE
from .attacks import AttackConfig
from .attacks import evaluate as attack_evaluate
from .cellspace import (
    SPACE_SIZE,
    canonical_id,
    canonical_ids,
    cell_from_id,
    conv_counts,
    decode_arch_string,
    encode_arch_string,
    enumerate_space,
    export_classes,
    kernel_param_count,
)
from .corruptions import KINDS as CORRUPTION_KINDS
from .corruptions import evaluate_corruption
from .datastore import ATTACK_KEYS, EPSILON_NUMERATORS, EVAL_KEYS, RobustnessRecord, SchemaError, UnknownIdError, desk_meta, dumps, read_dataset, write_dataset
from .evaluation import clean_record
from .measures import MeasureProtocol, measure_network, measurements_json
from .tinynet import Network, NetworkConfig, TrainingDiverged, build_network, synth_dataset, train

__all__ = ["main", "DEFAULT_CONFIG", "resolve_config", "select_ids", "arch_seed", "build_dataset"]

STORE_ENV = "ARCHROBUST_STORE"

DEFAULT_CONFIG = {
    "store": "archrobust_store",
    "dataset": "desk",
    "seed": 0,
    "workers": 1,
    "space": {"mode": "sample", "n": 32, "ids": []},
    "network": {"image_size": 8, "channels_in": 3, "num_classes": 4, "stem_width": 4, "stages": 2, "cells_per_stage": 1, "batch_norm": False},
    "data": {"n_train": 512, "n_test": 64, "seed": 0},
    "training": {"epochs": 8, "lr": 0.05, "batch_size": 32},
    "evaluations": ["clean", "fgsm", "pgd", "aa_apgd-ce", "aa_square", *CORRUPTION_KINDS],
    "attacks": {"aa_square": {"iterations": 5000}},
    "checkpoints": None,
    "measure": {"n_batches": 10, "batch_size": 64, "n_projections": 16, "power_iters": 20, "tol": 1e-3, "seed": 0, "against": ["clean", "fgsm@2"]},
    "search": {
        "objectives": ["clean", "fgsm@2"],
        "columns": ["clean", "fgsm@2", "pgd@2", "aa_apgd-ce@2", "aa_square@2", "mean_corruption"],
        "algorithms": list(SE.SEARCHERS),
        "runs": 100,
        "budget": 300,
        "settings": {},
    },
}

# keys that do not change any computed number
_NON_SEMANTIC = ("store", "workers", "space", "checkpoints", "measure", "search", "dataset")


class UsageError(ValueError):
    pass


# -- configuration -----------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, assignment: str) -> None:
    path, sep, raw = assignment.partition("=")
    if not sep or not path:
        raise UsageError(f"--set expects section.key=VALUE, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {path}: {p!r} is not a section")
    node[parts[-1]] = value


def resolve_config(config_file=None, sets=(), flags: dict | None = None, env=None) -> dict:
    """Defaults, then the JSON file, then ``--set`` items, then flags, then the env store root."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_file:
        try:
            with open(config_file, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_file}: {exc}") from None
    for s in sets:
        _set_path(cfg, s)
    for path, value in (flags or {}).items():
        if value is None:
            continue
        node = cfg
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    env = os.environ if env is None else env
    if (flags or {}).get("store") is None and env.get(STORE_ENV):
        cfg["store"] = env[STORE_ENV]
    _validate(cfg)
    return cfg


def _validate(cfg):
    for key in cfg["evaluations"]:
        if key not in EVAL_KEYS:
            raise UsageError(f"unknown evaluation key {key!r}")
        if key not in ("clean", *ATTACK_KEYS, *CORRUPTION_KINDS):
            raise UsageError(f"evaluation {key!r} has no implementation in this toolkit")
    for kind in cfg.get("attacks", {}):
        if kind not in ATTACK_KEYS:
            raise UsageError(f"unknown attack {kind!r} in 'attacks'")
    if cfg["space"]["mode"] not in ("full", "sample", "ids"):
        raise UsageError("space.mode must be full, sample or ids")
    if int(cfg["workers"]) < 1:
        raise UsageError("workers must be >= 1")
    NetworkConfig(**cfg["network"])


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def semantic_digest(cfg: dict) -> str:
    """Hash of every setting that influences computed records."""
    return _digest({k: v for k, v in cfg.items() if k not in _NON_SEMANTIC})


def training_digest(cfg: dict) -> str:
    return _digest({"network": cfg["network"], "data": cfg["data"], "training": cfg["training"]})


def arch_seed(seed: int, cid: int) -> int:
    """Worker-independent per-architecture seed."""
    return int.from_bytes(hashlib.sha256(f"{int(seed)}:{int(cid)}".encode()).digest()[:4], "little")


def select_ids(space: dict, seed: int) -> list[int]:
    """Canonical ids chosen by the ``space`` section, sorted."""
    mode = space["mode"]
    if mode == "full":
        return canonical_ids()
    if mode == "ids":
        ids = space.get("ids") or []
        if not ids:
            raise UsageError("space.mode 'ids' needs a non-empty id list")
        out = set()
        for i in ids:
            if isinstance(i, str) and i.startswith("|"):
                out.add(canonical_id(decode_arch_string(i)))
            else:
                i = int(i)
                if not 0 <= i < SPACE_SIZE:
                    raise UsageError(f"id {i} outside 0..{SPACE_SIZE - 1}")
                out.add(canonical_id(i))
        return sorted(out)
    reps = canonical_ids()
    n = int(space.get("n", 32))
    if not 1 <= n <= len(reps):
        raise UsageError(f"space.n must be in 1..{len(reps)}")
    rng = np.random.default_rng([int(seed), 0x5A3])
    return sorted(int(reps[k]) for k in rng.choice(len(reps), size=n, replace=False))


# -- building blocks ---------------------------------------------------------


def _network_config(cfg) -> NetworkConfig:
    return NetworkConfig(**cfg["network"])


@lru_cache(maxsize=4)
def _datasets_cached(net_json: str, data_json: str):
    ncfg = NetworkConfig(**json.loads(net_json))
    d = json.loads(data_json)
    return synth_dataset(ncfg, int(d["n_train"]), int(d["n_test"]), seed=int(d["seed"]))


def datasets(cfg):
    return _datasets_cached(json.dumps(cfg["network"], sort_keys=True), json.dumps(cfg["data"], sort_keys=True))


def _checkpoint_dir(cfg) -> Path:
    return Path(cfg["checkpoints"]) if cfg.get("checkpoints") else Path(cfg["store"]) / "_checkpoints"


def trained_network(cid: int, cfg: dict) -> Network:
    """Trained network of a canonical id, from the checkpoint cache when present."""
    folder = _checkpoint_dir(cfg)
    path = folder / f"{cid}_{training_digest(cfg)}_{int(cfg['seed'])}.json"
    if path.is_file():
        return Network.load(path)
    seed = arch_seed(cfg["seed"], cid)
    tr, _ = datasets(cfg)
    net = build_network(cell_from_id(cid), _network_config(cfg), seed=seed)
    t = cfg["training"]
    net = train(net, tr, epochs=int(t["epochs"]), lr=float(t["lr"]), seed=seed, batch_size=int(t.get("batch_size", 32)))
    folder.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    net.save(tmp)
    os.replace(tmp, path)
    return net


def _attack_config(cfg, kind, seed) -> AttackConfig:
    over = dict(cfg.get("attacks", {}).get(kind, {}))
    nums = over.pop("numerators", None)
    eps = tuple(v / 255 for v in (nums if nums is not None else EPSILON_NUMERATORS[kind]))
    return AttackConfig(kind, epsilons=eps, seed=seed, **over)


def attack_numerators(cfg) -> dict[str, list[float]]:
    out = {}
    for kind in ATTACK_KEYS:
        nums = cfg.get("attacks", {}).get(kind, {}).get("numerators")
        out[kind] = [float(v) for v in (nums if nums is not None else EPSILON_NUMERATORS[kind])]
    return out


def evaluate_architecture(cid: int, cfg: dict) -> dict[str, RobustnessRecord]:
    """One pass of the gathering loop: every configured evaluation of one architecture."""
    net = trained_network(cid, cfg)
    _, te = datasets(cfg)
    seed = arch_seed(cfg["seed"], cid)
    out = {}
    for key in cfg["evaluations"]:
        if key == "clean":
            out[key] = clean_record(net, te)
        elif key in ATTACK_KEYS:
            out[key] = attack_evaluate(net, te, _attack_config(cfg, key, seed))
        else:
            out[key] = evaluate_corruption(net, te, key, seed=seed)
    return out


def _work_dir(cfg) -> Path:
    return Path(cfg["store"]) / "_work" / cfg["dataset"] / semantic_digest(cfg)


def _worker(args):
    cid, cfg = args
    try:
        recs = evaluate_architecture(cid, cfg)
        return cid, {k: r.to_json() for k, r in recs.items()}, None
    except (TrainingDiverged, ArithmeticError, ValueError, RuntimeError, MemoryError) as exc:
        return cid, None, {"id": cid, "error": type(exc).__name__, "message": str(exc), "trace": traceback.format_exc(limit=3)}


def _public_config(cfg) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("store", "checkpoints", "workers")}


def build_dataset(cfg: dict, stop_after: int | None = None, log=None) -> dict:
    """Evaluate the selected architectures and (re)write the store.

    Finished architectures are kept as work files keyed by the semantic
    config digest; reruns skip them, so an interrupted run resumes where it
    stopped and ends with the same store as an uninterrupted one.
    """
    log = log or (lambda msg: None)
    ids = select_ids(cfg["space"], cfg["seed"])
    work = _work_dir(cfg)
    work.mkdir(parents=True, exist_ok=True)
    pending = [i for i in ids if not (work / f"{i}.json").is_file()]
    todo = pending if stop_after is None else pending[: max(0, int(stop_after))]
    failures = []

    def done(cid, payload, err):
        if err is not None:
            failures.append(err)
            log(f"architecture {cid} failed: {err['error']}: {err['message']}")
            return
        tmp = work / f"{cid}.json.tmp"
        tmp.write_text(dumps(payload), encoding="utf-8")
        os.replace(tmp, work / f"{cid}.json")
        log(f"architecture {cid} done")

    jobs = [(cid, cfg) for cid in todo]
    workers = min(int(cfg["workers"]), max(1, len(jobs)))
    if workers > 1 and "fork" in multiprocessing.get_all_start_methods():
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            for res in pool.imap_unordered(_worker, jobs):
                done(*res)
    else:
        for job in jobs:
            done(*_worker(job))

    finished = [i for i in ids if (work / f"{i}.json").is_file()]
    records = {}
    for cid in finished:
        payload = json.loads((work / f"{cid}.json").read_text(encoding="utf-8"))
        records[str(cid)] = {k: RobustnessRecord.from_json(v) for k, v in payload.items()}
    meta = desk_meta(attack_numerators(cfg), extra={"version": __version__, "config": _public_config(cfg), "config_digest": semantic_digest(cfg)})
    root = Path(cfg["store"])
    written = write_dataset(root, cfg["dataset"], meta, records) if records else []
    if records:
        read_dataset(root).validate()
    complete = len(finished) == len(ids)
    man = {
        "command": "build-dataset",
        "version": __version__,
        "dataset": cfg["dataset"],
        "config_digest": semantic_digest(cfg),
        "selected": ids,
        "finished": finished,
        "failed": sorted(f["id"] for f in failures),
        "complete": complete,
        "files": sorted(str(Path(p).relative_to(root)) for p in written),
    }
    (root / f"build_{cfg['dataset']}.manifest.json").write_text(json.dumps(man, indent=1) + "\n", encoding="utf-8")
    if failures:
        (root / f"build_{cfg['dataset']}.failures.json").write_text(json.dumps(failures, indent=1) + "\n", encoding="utf-8")
    man["failures"] = failures
    return man


# -- commands ----------------------------------------------------------------


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1)
    print(text, file=out or sys.stdout)


def cmd_enumerate(args, cfg):
    cells = enumerate_space()
    reps = canonical_ids()
    kpc = [kernel_param_count(c) for _, c in cells]
    slice_reps = [i for i in reps if kernel_param_count(cell_from_id(i)) == 18 and conv_counts(cell_from_id(i))[0] == 0]
    slice_cells = [i for i, c in cells if kernel_param_count(c) == 18 and conv_counts(c)[0] == 0]
    stats = {
        "total": len(cells),
        "unique": len(reps),
        "kernel_param_range": [min(kpc), max(kpc)],
        "kpc18_no_1x1": {"cells": len(slice_cells), "unique": len(slice_reps)},
    }
    if args.export:
        path = Path(args.export)
        path.parent.mkdir(parents=True, exist_ok=True)
        export_classes(path)
        stats["classes_file"] = str(path)
    _emit(stats)
    return 0


def cmd_build(args, cfg):
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    man = build_dataset(cfg, stop_after=args.stop_after, log=log)
    _emit({k: v for k, v in man.items() if k != "files"})
    if man["failures"]:
        return 3
    return 0 if man["complete"] else 4


def _out_dir(args, cfg, name):
    out = Path(args.out) if args.out else Path(cfg["store"]) / "_results" / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, man: dict):
    (out / "manifest.json").write_text(json.dumps(man, indent=1) + "\n", encoding="utf-8")


def cmd_measure(args, cfg):
    mcfg = dict(cfg["measure"])
    against = mcfg.pop("against", [])
    protocol = MeasureProtocol(**mcfg)
    ids = select_ids(cfg["space"], cfg["seed"])
    tr, te = datasets(cfg)
    table = {}
    for cid in ids:
        fresh = build_network(cell_from_id(cid), _network_config(cfg), seed=arch_seed(cfg["seed"], cid))
        table[str(cid)] = measure_network(fresh, trained_network(cid, cfg), tr, te, protocol)
    body = measurements_json(table)
    out = _out_dir(args, cfg, "measure")
    (out / "measurements.json").write_text(json.dumps(body, indent=1) + "\n", encoding="utf-8")
    outputs = ["measurements.json"]
    corr = {}
    root = Path(cfg["store"])
    if against and (root / cfg["dataset"]).is_dir():
        store = read_dataset(root)
        for metric in against:
            try:
                ref = AN.metric_values(store, cfg["dataset"], metric)
            except KeyError:
                continue
            for state in ("random_init", "pretrained"):
                for split in ("train", "test"):
                    for m in ("jacobian", "hessian"):
                        col = {i: body[i][state][split][m] for i in body}
                        try:
                            corr[f"{m}/{state}/{split} vs {metric}"] = AN.kendall_tau(col, ref)
                        except ValueError:
                            corr[f"{m}/{state}/{split} vs {metric}"] = None
        (out / "correlations.json").write_text(json.dumps(corr, indent=1) + "\n", encoding="utf-8")
        outputs.append("correlations.json")
    _write_manifest(out, AN.manifest(root, against, outputs, command="measure", protocol=protocol.to_dict(), ids=ids, config_digest=training_digest(cfg)))
    _emit({"measured": len(ids), "out": str(out), "correlations": corr})
    return 0


def _objective(store, dataset, metric) -> SE.Objective:
    if metric in ("mean_adversarial", "mean_corruption"):
        vals = AN.metric_values(store, dataset, metric)
        meta = store.meta(dataset)
        values, source = {}, {}
        for sid in sorted(vals, key=int):
            cid = canonical_id(decode_arch_string(meta.ids[sid]["nb201-string"])) if sid in meta.ids else canonical_id(int(sid))
            if cid not in values:
                values[cid], source[cid] = vals[sid], sid
        return SE.Objective(values, metric, source)
    key, sep, idx = metric.rpartition("@")
    if sep:
        return SE.Objective.from_store(store, dataset, key, int(idx))
    return SE.Objective.from_store(store, dataset, metric)


def cmd_search(args, cfg):
    s = cfg["search"]
    store = read_dataset(Path(cfg["store"]))
    ds = cfg["dataset"]
    objectives = {m: _objective(store, ds, m) for m in s["objectives"]}
    columns = {}
    for m in s["columns"]:
        try:
            columns[m] = _objective(store, ds, m)
        except KeyError:
            pass  # column not present in this store
    common = set.intersection(*(set(o.values) for o in list(objectives.values()) + list(columns.values())))
    space = SE.SearchSpace(sorted(common))
    report = SE.benchmark_protocol(objectives, s["algorithms"], int(s["runs"]), int(s["budget"]), int(cfg["seed"]), columns, space, s.get("settings") or {})
    out = _out_dir(args, cfg, "search")
    (out / "report.csv").write_text(SE.report_csv(report), encoding="utf-8")
    (out / "report.json").write_text(SE.report_json(report) + "\n", encoding="utf-8")
    if args.traces:
        traces = {f"{o}/{a}": [t.to_dict() for t in ts] for (o, a), ts in report["traces"].items()}
        (out / "traces.json").write_text(json.dumps(traces) + "\n", encoding="utf-8")
    _write_manifest(out, AN.manifest(cfg["store"], list(objectives) + list(columns), ["report.csv", "report.json"] + (["traces.json"] if args.traces else []), command="search", dataset=ds, search=s, space_size=len(space)))
    _emit({"rows": report["rows"], "optimum": report["optimum"], "out": str(out)})
    return 0


def cmd_analyze(args, cfg):
    store = read_dataset(Path(cfg["store"]))
    ds = cfg["dataset"]
    out = _out_dir(args, cfg, "analyze")
    task = args.task
    metrics = args.metrics or ["clean", "fgsm@2"]
    include = not args.exclude_fgsm_255
    outputs = []
    if task == "correlation":
        series = [AN.metric_values(store, ds, m, include) for m in metrics]
        mat = AN.correlation_matrix(series)
        AN.write_json(out / "correlation.json", {"metrics": metrics, "kendall_tau_b": mat.tolist()})
        outputs.append("correlation.json")
        result = {"metrics": metrics, "matrix": mat.tolist()}
    elif task == "summary":
        ncls = store.record(ds, "clean", store.ids(ds)[0]).cm[0].shape[0]
        rows = []
        for m in metrics:
            st = AN.summarize(AN.metric_values(store, ds, m, include), num_classes=ncls)
            rows.append([m, st.min, st.q1, st.median, st.q3, st.max, st.mean, st.count, st.guessing_baseline])
        AN.write_csv(out / "summary.csv", ["metric", "min", "q1", "median", "q3", "max", "mean", "count", "guessing_baseline"], rows)
        outputs.append("summary.csv")
        result = {r[0]: dict(zip(["min", "q1", "median", "q3", "max", "mean", "count", "guessing_baseline"], r[1:])) for r in rows}
    elif task == "topk":
        metric = metrics[0]
        vals = AN.metric_values(store, ds, metric, include)
        sel = AN.slice_ids(store, ds, vals, args.kernel_params, args.conv1x1)
        k = len(sel) if args.k is None else args.k
        top = AN.top_k(vals, k, sel)
        AN.write_csv(out / "topk.csv", ["rank", "id", "arch", metric], [[r + 1, i, store.meta(ds).ids.get(i, {}).get("nb201-string", encode_arch_string(cell_from_id(int(i)))), v] for r, (i, v) in enumerate(top)])
        outputs.append("topk.csv")
        slice_vals = [vals[i] for i in sel]
        result = {"metric": metric, "selected": len(sel), "range": [min(slice_vals), max(slice_vals)] if sel else None, "top": top}
    elif task == "neighbors":
        if args.arch is None:
            raise UsageError("analyze neighbors needs --arch")
        metric = metrics[-1] if args.metrics else "mean_adversarial"
        rows = AN.neighbor_delta(store, ds, args.arch, metric, include)
        AN.write_csv(out / "neighbors.csv", ["id", "edits", "delta_clean", f"delta_{metric}"], [[r["id"], ";".join(f"{e}:{a}->{b}" for e, a, b in r["edits"]), r["delta_clean"], r["delta_metric"]] for r in rows])
        outputs.append("neighbors.csv")
        result = {"arch": str(args.arch), "metric": metric, "rows": rows}
    else:  # aggregate
        key = args.key or "clean"
        ids = store.ids(ds, key)
        recs = [store.record(ds, key, i) for i in ids]
        idx = args.index or 0
        result = {"key": key, "index": idx, "archs": len(recs), "cm": AN.aggregate_cm(recs, idx).tolist()}
        for scheme in ("label", "argmax", "prediction"):
            result[scheme] = AN.aggregate_confidence(recs, scheme, idx).tolist()
        AN.write_json(out / "aggregate.json", result)
        outputs.append("aggregate.json")
    _write_manifest(out, AN.manifest(cfg["store"], metrics, outputs, command=f"analyze {task}", dataset=ds, include_fgsm_255=include))
    _emit(result)
    return 0


def cmd_query(args, cfg):
    store = read_dataset(Path(cfg["store"]))
    ds = args.dataset or cfg["dataset"]
    if args.epsilons:
        _emit({"key": args.key, "epsilons": store.epsilons(args.key, ds)})
        return 0
    if args.best:
        arch, value = store.best(ds, args.key, args.measurement, args.index)
        _emit({"dataset": ds, "key": args.key, "measurement": args.measurement, "index": args.index, "best_id": arch, "value": value})
        return 0
    if args.string:
        arch = store.id_of_string(args.string, ds)
    elif args.id is not None:
        arch = args.id
    else:
        raise UsageError("query needs --id, --string, --best or --epsilons")
    value = store.query(ds, args.key, args.measurement, arch, args.index)
    _emit({"dataset": ds, "key": args.key, "measurement": args.measurement, "id": str(arch), "resolved": store.resolve(arch, ds), "index": args.index, "value": value})
    return 0


# -- argument parsing ----------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="archrobust", description="Robustness datasets for the NB201 cell space.")
    p.add_argument("--version", action="version", version=f"archrobust {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, space=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=JSON", help="override one config value")
        sp.add_argument("--store", help=f"store root (else ${STORE_ENV}, else config)")
        sp.add_argument("--dataset", help="dataset folder name inside the store")
        sp.add_argument("--seed", type=int)
        if space:
            sp.add_argument("--n-archs", type=int, help="sample this many canonical architectures")
            sp.add_argument("--ids", help="comma-separated architecture ids or arch strings")
            sp.add_argument("--full", action="store_true", help="all canonical architectures")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--workers", type=int)
            sp.add_argument("--checkpoints", help="checkpoint cache folder")
            sp.add_argument("--n-test", type=int, help="test examples per architecture")

    e = sub.add_parser("enumerate", help="space statistics")
    common(e)
    e.add_argument("--export", help="write the class table as JSON")
    e.set_defaults(func=cmd_enumerate)

    b = sub.add_parser("build-dataset", help="gather a robustness dataset")
    common(b, space=True)
    b.add_argument("--evaluations", help="comma-separated evaluation keys")
    b.add_argument("--square-iterations", type=int)
    b.add_argument("--stop-after", type=int, help="process at most this many new architectures")
    b.add_argument("-v", "--verbose", action="store_true")
    b.set_defaults(func=cmd_build)

    m = sub.add_parser("measure", help="training-free measures")
    common(m, space=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_measure)

    s = sub.add_parser("search", help="benchmark the searchers on store objectives")
    common(s)
    s.add_argument("--objectives", help="comma-separated metrics, e.g. clean,fgsm@2")
    s.add_argument("--algorithms", help="comma-separated searcher names")
    s.add_argument("--runs", type=int)
    s.add_argument("--budget", type=int)
    s.add_argument("--traces", action="store_true", help="also write every trace")
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    a = sub.add_parser("analyze", help="statistics over a store")
    common(a)
    a.add_argument("task", choices=["correlation", "summary", "topk", "neighbors", "aggregate"])
    a.add_argument("--metrics", nargs="+")
    a.add_argument("--kernel-params", type=int)
    a.add_argument("--conv1x1", type=int)
    a.add_argument("--k", type=int)
    a.add_argument("--arch")
    a.add_argument("--key")
    a.add_argument("--index", type=int)
    a.add_argument("--exclude-fgsm-255", action="store_true")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    q = sub.add_parser("query", help="read values from a store")
    common(q)
    q.add_argument("--key", default="clean")
    q.add_argument("--measurement", default="accuracy")
    q.add_argument("--id")
    q.add_argument("--string")
    q.add_argument("--index", type=int)
    q.add_argument("--best", action="store_true")
    q.add_argument("--epsilons", action="store_true")
    q.set_defaults(func=cmd_query)
    return p


def _flags(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    flags = {"store": g("store"), "dataset": g("dataset"), "seed": g("seed"), "workers": g("workers"), "checkpoints": g("checkpoints"), "training.epochs": g("epochs")}
    if g("full"):
        flags["space.mode"] = "full"
    elif g("ids"):
        flags["space.mode"] = "ids"
        flags["space.ids"] = [s if s.startswith("|") else int(s) for s in g("ids").split(",") if s]
    elif g("n_archs") is not None:
        flags["space.mode"] = "sample"
        flags["space.n"] = g("n_archs")
    if g("evaluations"):
        flags["evaluations"] = [k for k in g("evaluations").split(",") if k]
    if g("square_iterations") is not None:
        flags["attacks.aa_square.iterations"] = g("square_iterations")
    if g("n_test") is not None:
        flags["data.n_test"] = g("n_test")
    for name in ("objectives", "algorithms"):
        if g(name):
            flags[f"search.{name}"] = [k for k in g(name).split(",") if k]
    for name in ("runs", "budget"):
        if g(name) is not None:
            flags[f"search.{name}"] = g(name)
    return flags


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set, _flags(args))
        return args.func(args, cfg)
    except (UsageError, SchemaError, UnknownIdError, KeyError, IndexError, ValueError, FileNotFoundError) as exc:
        code = 2
        err = exc
    except Exception as exc:  # noqa: BLE001
        code = 1
        err = exc
    report = {"status": "error", "command": args.command, "error": type(err).__name__, "message": str(err.args[0]) if isinstance(err, KeyError) and err.args else str(err)}
    if isinstance(err, SchemaError):
        report["file"] = str(err.file) if err.file else None
        report["path"] = list(err.path)
    print(json.dumps(report), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
