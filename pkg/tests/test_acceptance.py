"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

The desk store shared by criteria 4, 8 and 10 is built once through the CLI
(32 sampled canonical architectures, reduced test split and Square budget).
"""

import json
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from archrobust import analysis as AN
from archrobust import cellspace as cs
from archrobust import cli
from archrobust import measures as M
from archrobust import search as S
from archrobust.attacks import AttackConfig, default_epsilons, evaluate, run_attack
from archrobust.datastore import ATTACK_KEYS, parse_file_name, file_name, read_dataset, write_dataset
from archrobust.tinynet import NetworkConfig, build_network, synth_dataset, train

from .conftest import MICRO, MIXED
from .helpers import EQUIV_CONFIG, brute_tau_b, class_function_spread, fd_gradient_check, sample_classes, verdict

DESK_ARCHS = 32
DESK_FLAGS = {"space.n": DESK_ARCHS, "data.n_test": 32, "attacks.aa_square.iterations": 1000}
ATTACK_NETS = 16
ATTACK_EXAMPLES = 8


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Build the desk store once; returns (config, store root, wall seconds, cpu seconds)."""
    root = tmp_path_factory.mktemp("desk")
    cfg = cli.resolve_config(flags={"store": str(root), **DESK_FLAGS}, env={})
    w0, c0 = time.perf_counter(), time.process_time()
    argv = ["build-dataset", "--store", str(root)] + sum((["--set", f"{k}={json.dumps(v)}"] for k, v in DESK_FLAGS.items()), [])
    code = cli.main(argv)
    assert code == 0
    return cfg, root, time.perf_counter() - w0, time.process_time() - c0


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_space_counts():
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "archrobust.cli", "enumerate"], capture_output=True, text=True, check=True)
    elapsed = time.perf_counter() - t0
    stats = json.loads(out.stdout)
    ok = stats["total"] == 15625 and stats["unique"] == 6466 and stats["kernel_param_range"] == [0, 54] and elapsed < 60
    verdict("1 (counts)", ok, f"total {stats['total']}, unique {stats['unique']}, kernel params {stats['kernel_param_range']}, {elapsed:.1f}s")
    assert ok


def test_criterion_1_slice_408():
    cells = [cs.cell_from_id(r) for r in cs.canonical_ids()]
    n = sum(1 for c in cells if cs.kernel_param_count(c) == 18 and cs.conv_counts(c)[0] == 0)
    ok = n == 408
    verdict("1 (kpc=18, no 1x1 slice)", ok, f"{n} representatives, expected 408")
    assert ok


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_isomorphism_oracle():
    rng = np.random.default_rng(2)
    x = rng.random((100,) + EQUIV_CONFIG.input_shape)
    worst = max(class_function_spread(rep, EQUIV_CONFIG, x, seed=7) for rep in sample_classes(50, rng))
    ok = worst <= 1e-10
    verdict(2, ok, f"50 classes, max abs logit difference {worst:.2e}")
    assert ok


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_gradients():
    rng = np.random.default_rng(3)
    worst_x = worst_t = 0.0
    for _ in range(20):
        cid = int(rng.integers(cs.SPACE_SIZE))
        net = build_network(cs.cell_from_id(cid), MICRO, seed=int(rng.integers(2**31)))
        x = rng.random((2,) + MICRO.input_shape)
        y = rng.integers(0, MICRO.num_classes, size=2)
        ex, et, _ = fd_gradient_check(net, x, y, rng, per_block=3)
        worst_x, worst_t = max(worst_x, ex), max(worst_t, et)
    ok = worst_x <= 1e-4 and worst_t <= 1e-4
    verdict(3, ok, f"20 nets, max relative error input {worst_x:.1e}, parameters {worst_t:.1e}")
    assert ok


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_attack_invariants(desk):
    cfg, root, _, _ = desk
    ids = cli.select_ids(cfg["space"], cfg["seed"])[:ATTACK_NETS]
    _, te = cli.datasets(cfg)
    data = type(te)(te.images[:ATTACK_EXAMPLES], te.labels[:ATTACK_EXAMPLES], te.split, te.seed)
    t0 = time.perf_counter()
    ball = rng_ok = zero = square = True
    worst = 0.0
    checked = 0
    for cid in ids:
        net = cli.trained_network(cid, cfg)
        for kind in ATTACK_KEYS:
            acfg = AttackConfig(kind, epsilons=default_epsilons(kind), seed=cli.arch_seed(0, cid))
            _, advs, es = evaluate(net, data, acfg, return_batches=True)
            x_adv = np.concatenate([a.x_adv for a in advs])
            x = np.tile(data.images, (len(acfg.epsilons), 1, 1, 1))
            dist = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1)
            worst = max(worst, float((dist - es).max()))
            ball &= bool(np.all(dist <= es + 1e-12))
            rng_ok &= bool(x_adv.min() >= 0 and x_adv.max() <= 1)
            checked += len(x)
            if kind == "aa_square":
                for a in advs:
                    square &= all(all(b < c for c, b in zip(h, h[1:])) for h in a.history)
            same = run_attack(net, data.images, data.labels, acfg, 0.0).x_adv
            zero &= np.array_equal(same, data.images)
    elapsed = time.perf_counter() - t0
    ok = ball and rng_ok and zero and square and elapsed < 20 * 60
    verdict(
        4, ok,
        f"{len(ids)} nets, {checked} adversarial examples: ball {ball} (max excess {worst:.1e}), range {rng_ok}, "
        f"eps=0 identity {zero}, square margins decreasing {square}, {elapsed:.0f}s",
    )
    assert ok


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_measure_oracles():
    rng = np.random.default_rng(5)
    wide = NetworkConfig(image_size=16, stem_width=4, num_classes=4)
    tr, te = synth_dataset(wide, 256, 16, seed=1)
    net = train(build_network(cs.decode_arch_string(MIXED), wide, seed=0), tr, epochs=3, lr=0.05, seed=0)
    x, y = te.images[:16], te.labels[:16]
    jac_err = abs(M.jacobian_frobenius_proj(net, x, 128, seed=0) / M.jacobian_frobenius_exact(net, x) - 1)
    dense = np.abs(np.linalg.eigvalsh(M.hessian_dense(net, x[:8]))).max(axis=1)
    power = M.hessian_lambda_max(net, x[:8], y[:8], iters=100, tol=1e-5)
    hes_err = float(np.abs(power.per_example / dense - 1).max())

    A = rng.normal(size=(4, 6))
    lin = M.LinearModel(A, rng.normal(size=4))
    xl = rng.normal(size=(5, 6))
    lin_jac = abs(M.jacobian_frobenius_exact(lin, xl) / np.linalg.norm(A) - 1)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    quad = M.QuadraticModel(q @ np.diag([5.0, 3.0, 2.0, 1.0, 0.5, -1.0, 0.1, 0.2]) @ q.T)
    quad_err = float(np.abs(M.hessian_lambda_max(quad, rng.normal(size=(3, 8)), np.zeros(3, int), iters=200, tol=1e-10).per_example / 5 - 1).max())
    yl = rng.integers(0, 4, 5)
    p = np.exp(lin.forward(xl))
    p /= p.sum(axis=1, keepdims=True)
    closed = np.array([np.abs(np.linalg.eigvalsh(A.T @ (np.diag(pi) - np.outer(pi, pi)) @ A)).max() for pi in p])
    soft_err = float(np.abs(M.hessian_lambda_max(lin, xl, yl, iters=300, tol=1e-12).per_example / closed - 1).max())
    ok = jac_err <= 0.05 and hes_err <= 0.01 and max(lin_jac, quad_err, soft_err) <= 1e-3
    verdict(
        5, ok,
        f"projection vs dense {jac_err:.2%}, power vs dense {hes_err:.2%} (D={x[0].size}), "
        f"linear Jacobian {lin_jac:.1e}, quadratic {quad_err:.1e}, linear softmax {soft_err:.1e}",
    )
    assert ok


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_kendall():
    rng = np.random.default_rng(6)
    worst = 0.0
    for t in range(1000):
        n = int(rng.integers(3, 60))
        a = rng.integers(0, 8, n).astype(float) if t % 2 else rng.normal(size=n)
        b = rng.integers(0, 8, n).astype(float) if t % 3 == 0 else rng.normal(size=n)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        worst = max(worst, abs(AN.kendall_tau(a, b) - brute_tau_b(a, b)))
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    self_tau = AN.kendall_tau(x, x)
    ranked = np.argsort(np.argsort(x)).astype(float)  # strictly monotone images of x
    invariant = AN.kendall_tau(np.exp(x), y) == AN.kendall_tau(x, y) == AN.kendall_tau(ranked, y) == AN.kendall_tau(x**3, y)
    ok = worst <= 1e-12 and self_tau == 1.0 and invariant
    verdict(6, ok, f"max deviation from brute force {worst:.1e} over 1000 pairs, tau(x,x)={self_tau}, monotone invariance {invariant}")
    assert ok


# -- 7 ---------------------------------------------------------------------------


def test_criterion_7_searchers():
    full = S.SearchSpace.full()
    mini = S.mini_space()
    rng = np.random.default_rng(7)
    obj = S.Objective({i: float(rng.random()) for i in full.ids}, "random")
    fast = {"bananas_lite": {"epochs": 40}}
    invariants = determinism = True
    traces = 0
    for alg, fn in S.SEARCHERS.items():
        for seed in range(3):
            kw = fast.get(alg, {})
            a = fn(obj, 40, seed, space=full, **kw)
            b = fn(obj, 40, seed, space=full, **kw)
            try:
                a.check()
                b.check()
            except AssertionError:
                invariants = False
            determinism &= a.queries == b.queries
            traces += 2
    mobj = S.Objective({i: float(rng.random()) for i in mini.ids}, "mini")
    target = mobj.optimum(mini)
    found = {alg: S.SEARCHERS[alg](mobj, len(mini), 0, space=mini).best for alg in ("random_search", "local_search")}
    optimal = all(v == target for v in found.values())
    ok = invariants and determinism and optimal
    verdict(7, ok, f"{traces} traces, invariants {invariants}, bit-deterministic {determinism}, exhaustive optimum {optimal} on {len(mini)} mini-space classes")
    assert ok


# -- 8 ---------------------------------------------------------------------------


def test_criterion_8_datastore(desk, tmp_path):
    cfg, root, _, _ = desk
    ds = cfg["dataset"]
    store = read_dataset(root)
    names = sorted(p.name for p in (root / ds).iterdir() if p.name != "meta.json")
    naming = all(re.fullmatch(r"[a-z0-9_\-]+_(accuracy|confidence|cm)\.json", n) and file_name(*parse_file_name(n)) == n for n in names)
    records = {i: {k: store.record(ds, k, i) for k in store.keys(ds)} for i in store.ids(ds)}
    identity = True
    for recs in records.values():
        for r in recs.values():
            for a, cm in zip(r.accuracy, r.cm):
                identity &= abs(a - np.trace(cm) / cm.sum()) <= 1e-12
    write_dataset(tmp_path, ds, store.meta(ds), records)
    again = {p.name: p.read_bytes() for p in (tmp_path / ds).iterdir()}
    orig = {p.name: p.read_bytes() for p in (root / ds).iterdir()}
    round_trip = again == orig
    n_rec = sum(len(r) for r in records.values())
    ok = naming and identity and round_trip
    verdict(8, ok, f"{len(names)} files named key_measurement.json {naming}, accuracy = trace(cm)/N on {n_rec} records {identity}, byte-identical rewrite {round_trip}")
    assert ok


# -- 9 ---------------------------------------------------------------------------

OFFICIAL_ENV = "ARCHROBUST_OFFICIAL_ROOT"


def test_criterion_9_published_files():
    root = os.environ.get(OFFICIAL_ENV)
    if not root:
        line = f"criterion 9: SKIP  set {OFFICIAL_ENV} to a folder with the published files"
        from .helpers import ACCEPTANCE

        ACCEPTANCE.append(line)
        pytest.skip(line)
    store = read_dataset(Path(root))
    ds = "cifar10"

    def pct(v):
        return round(100 * v if v <= 1 else v, 2)

    got = {"clean": pct(max(AN.metric_values(store, ds, "clean").values()))}
    for label, key in (("fgsm", "fgsm@2"), ("pgd", "pgd@2"), ("apgd", "aa_apgd-ce@2"), ("square", "aa_square@2")):
        got[label] = pct(max(AN.metric_values(store, ds, key).values()))
    got["corruption"] = pct(max(AN.mean_corruption_table(store, ds).values()))
    expected = {"clean": 94.68, "fgsm": 69.24, "pgd": 58.85, "apgd": 54.02, "square": 73.61, "corruption": 58.55}
    adv = AN.metric_values(store, ds, "mean_adversarial")
    sl = AN.slice_ids(store, ds, adv, kernel_params=18, conv1x1=0)
    rng_ = [round(min(adv[i] for i in sl), 2), round(max(adv[i] for i in sl), 2)]
    iso = store.resolve(1832, ds)
    ok = got == expected and rng_ == [0.21, 0.40] and iso == "309"
    verdict(9, ok, f"optimum row {got}, slice of {len(sl)} range {rng_}, 1832 -> {iso}")
    assert ok


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_end_to_end(desk, tmp_path, capsys):
    cfg, root, build_wall, build_cpu = desk
    w0, c0 = time.perf_counter(), time.process_time()
    out = tmp_path / "search"
    small_population = json.dumps({"regularized_evolution": {"population": 10, "sample": 3}})
    argv = ["search", "--store", str(root), "--objectives", "fgsm@2,clean", "--runs", "10", "--budget", "20", "--out", str(out)]
    code = cli.main(argv + ["--set", f"search.settings={small_population}"])
    capsys.readouterr()
    search_wall, search_cpu = time.perf_counter() - w0, time.process_time() - c0
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    store = read_dataset(root)
    adv = AN.metric_values(store, cfg["dataset"], "mean_adversarial")
    spread = max(adv.values()) - min(adv.values())
    build_man = json.loads((root / f"build_{cfg['dataset']}.manifest.json").read_text())
    search_man = json.loads((out / "manifest.json").read_text())
    rows = {(r["objective"], r["algorithm"]): r for r in report["rows"]}
    algs = sorted(S.SEARCHERS)
    total_cpu = build_cpu + search_cpu
    ok = (
        build_man["complete"]
        and len(build_man["finished"]) == DESK_ARCHS
        and all(("fgsm@2", a) in rows for a in algs)
        and spread > 0
        and total_cpu < 30 * 60
    )
    summary = ", ".join(f"{a} {rows[('fgsm@2', a)]['mean']:.3f}" for a in algs)
    cross = rows[("clean", "random_search")]["fgsm@2"], rows[("fgsm@2", "random_search")]["fgsm@2"]
    verdict(
        10, ok,
        f"{len(build_man['finished'])} archs built in {build_wall:.0f}s, search {search_wall:.0f}s, cpu {total_cpu:.0f}s; "
        f"mean adversarial accuracy spread {spread:.3f} [{min(adv.values()):.3f}, {max(adv.values()):.3f}]; "
        f"fgsm@2 found: {summary}; optimum {report['optimum']['fgsm@2']:.3f}; "
        f"random search fgsm@2 when searching clean {cross[0]:.3f} vs fgsm {cross[1]:.3f}; "
        f"build digest {build_man['config_digest']}, search manifest keys {search_man['keys']}",
    )
    assert ok
