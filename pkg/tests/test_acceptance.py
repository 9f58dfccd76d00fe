"""Acceptance criteria, one test each.

Every test records a single ``[PASS]``/``[FAIL]``/``[SKIP]`` line; the lines
are printed together at the end of the pytest run, or directly when this
file is executed as a script.

Criterion 7 needs the COIL-20 images, which are not shipped. Point
``UDLL_COIL20`` at a ``.udlb`` file or a directory of ``<class>_<index>.pgm``
images (32x32 or larger) to run it.
"""

import itertools
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from udll import cli
from udll.metrics import clustering_accuracy
from udll.model import BENCHMARK_CONFIGS, HyperParams, attach_self_expressive, init_state, parameter_count, total_loss
from udll.priorgraph import build_prior_graph, pairwise_sqdist, qp_oracle_column, solve_column
from udll.spectral import jacobi_eigh, normalized_laplacian, postprocess_affinity, spectral_cluster
from udll.tensorcore import (
    conv2d_backward,
    conv2d_forward,
    conv2d_transpose_backward,
    conv2d_transpose_forward,
    finite_diff_grad,
    relu,
    relu_backward,
)

sys.path.insert(0, str(Path(__file__).parent))
from conftest import rel_err  # noqa: E402
from test_model import numeric_grad, tiny_problem  # noqa: E402

RESULTS = []

BLOBS = "classes=3,per_class=30,h=16,w=16,noise_sigma=0.05,seed=0"
BLOBS_ARGS = ["--format", "synth", "--dataset", BLOBS, "--alpha", "10", "--gamma", "1", "--k", "3", "--seed", "0"]


def record(number, title, ok, detail):
    tag = "SKIP" if ok is None else ("PASS" if bool(ok) else "FAIL")
    line = f"[{tag}] criterion {number}: {title} -- {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def test_criterion_1_graph_solver_oracle():
    rng = np.random.default_rng(101)
    worst, interval_ok = 0.0, True
    for trial in range(200):
        k = (1, 3, 5)[trial % 3]
        n = int(rng.integers(k + 2, 51))
        Z = rng.normal(size=(int(rng.integers(2, 9)), n))
        j = int(rng.integers(n))
        d = pairwise_sqdist(Z)[:, j]
        idx, w, lam, degenerate = solve_column(d, k, source_index=j)
        closed = np.zeros(n)
        closed[idx] = w
        others = np.delete(np.arange(n), j)
        oracle = np.zeros(n)
        oracle[others] = qp_oracle_column(d[others], lam)
        worst = max(worst, np.max(np.abs(closed - oracle)))
        m = np.sort(d[others])
        head = m[:k].sum()
        lower, upper = 0.5 * k * m[k - 1] - 0.5 * head, 0.5 * k * m[k] - 0.5 * head
        interval_ok &= (not degenerate) and lower < lam <= upper * (1 + 1e-15)
    ok = worst <= 1e-8 and interval_ok
    record(1, "closed-form column == QP oracle", ok, f"200 columns, max |diff| {worst:.2e}, lambda in interval: {interval_ok}")
    assert ok


def _layer_op_errors(seed):
    rng = np.random.default_rng([seed, 7])
    errs = []
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    cin, cout, s = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x = rng.normal(size=(2, h, w, cin))
    K = rng.normal(size=(s, s, cin, cout))
    b = rng.normal(size=cout)
    R = rng.normal(size=conv2d_forward(x, K, b, stride).shape)
    gx, gk, gb = conv2d_backward(R, x, K, stride)
    errs.append(rel_err(gx, finite_diff_grad(lambda v: np.sum(conv2d_forward(v, K, b, stride) * R), x)))
    errs.append(rel_err(gk, finite_diff_grad(lambda v: np.sum(conv2d_forward(x, v, b, stride) * R), K)))
    errs.append(rel_err(gb, finite_diff_grad(lambda v: np.sum(conv2d_forward(x, K, v, stride) * R), b)))

    y = rng.normal(size=R.shape)
    Kt = rng.normal(size=(s, s, cin, cout))
    bt = rng.normal(size=cin)
    hw = (h, w)
    Rt = rng.normal(size=x.shape)
    gy, gkt, gbt = conv2d_transpose_backward(Rt, y, Kt, stride)
    f = lambda yy, kk, bb: np.sum(conv2d_transpose_forward(yy, kk, bb, stride, hw) * Rt)  # noqa: E731
    errs.append(rel_err(gy, finite_diff_grad(lambda v: f(v, Kt, bt), y)))
    errs.append(rel_err(gkt, finite_diff_grad(lambda v: f(y, v, bt), Kt)))
    errs.append(rel_err(gbt, finite_diff_grad(lambda v: f(y, Kt, v), bt)))

    a = rng.normal(size=(4, 5))
    a[np.abs(a) < 1e-3] = 0.5  # keep away from the kink
    Ra = rng.normal(size=a.shape)
    errs.append(rel_err(relu_backward(Ra, a), finite_diff_grad(lambda v: np.sum(relu(v) * Ra), a)))
    return errs


LOSS_MIXES = {
    "reconstruction": dict(alpha=0.0, beta=0.0, gamma=0.0),
    "+self-expressive": dict(beta=0.0, gamma=0.0),
    "+||W||^2": dict(alpha=0.0, gamma=0.0),
    "+locality": dict(alpha=0.0, beta=0.0),
    "all terms": dict(),
}


def _loss_errors(seed):
    errs = {}
    X, state, graph, hyper = tiny_problem(seed)
    for label, override in LOSS_MIXES.items():
        h = HyperParams(**{**hyper.__dict__, **override})
        total_loss(X, state, graph, h, need_grad=True)
        analytic = {k: p.grad.copy() for k, p in state.params.items()}
        errs[label] = max(rel_err(analytic[k], numeric_grad(X, state, graph, h, k)) for k in state.params)
    return errs


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    layer_worst, loss_worst = 0.0, {k: 0.0 for k in LOSS_MIXES}
    for seed in range(20):
        layer_worst = max(layer_worst, max(_layer_op_errors(seed)))
        for label, e in _loss_errors(seed).items():
            loss_worst[label] = max(loss_worst[label], e)
    elapsed = time.perf_counter() - start
    worst = max(layer_worst, *loss_worst.values())
    ok = worst <= 1e-4 and elapsed < 60
    terms = ", ".join(f"{k} {v:.1e}" for k, v in loss_worst.items())
    record(2, "analytic gradients == central differences", ok,
           f"20 seeds, layer ops {layer_worst:.1e}, {terms}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_parameter_count():
    expected = {"coil20": 2_073_886, "orl": 160_700}
    parts, ok = [], True
    for name, p in BENCHMARK_CONFIGS.items():
        formula = parameter_count(p["config"], p["n"])
        actual = attach_self_expressive(init_state(p["config"]), p["n"]).n_parameters()
        good = formula == actual and formula == expected.get(name, formula)
        ok &= good
        parts.append(f"{name} formula {formula:,} model {actual:,}" + ("" if good else " MISMATCH"))
    record(3, "parameter count formula == constructed model", ok, "; ".join(parts))
    assert ok


def _brute_force_acc(truth, pred):
    k = max(max(truth), max(pred)) + 1
    best = max(sum(perm[p] == t for p, t in zip(pred, truth)) for perm in itertools.permutations(range(k)))
    return best / len(truth)


def test_criterion_4_accuracy_oracle():
    rng = np.random.default_rng(404)
    mismatches = 0
    for _ in range(500):
        k, n = int(rng.integers(1, 6)), int(rng.integers(1, 13))
        truth, pred = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        mismatches += clustering_accuracy(truth, pred) != _brute_force_acc(truth, pred)
    worked = clustering_accuracy([0, 0, 1, 1], [1, 1, 1, 0])
    ok = mismatches == 0 and worked == 0.75
    record(4, "ACC == exhaustive permutation search", ok, f"500 pairs, {mismatches} mismatches, worked case {worked}")
    assert ok


def test_criterion_5_spectral_recovery():
    rng = np.random.default_rng(505)
    failures, mult_errors, trials = 0, 0, 40
    for _ in range(trials):
        blocks = int(rng.integers(2, 6))
        sizes = rng.integers(2, 60 // blocks + 1, size=blocks)
        truth = np.repeat(np.arange(blocks), sizes)
        perm = rng.permutation(truth.size)
        truth = truth[perm]
        W = (truth[:, None] == truth[None, :]).astype(float)
        pred = spectral_cluster(W, blocks, seed=0)
        failures += clustering_accuracy(truth, pred) != 1.0
        L, _ = normalized_laplacian(postprocess_affinity(W).S)
        evals, _ = jacobi_eigh(L)
        mult_errors += int(np.count_nonzero(np.abs(evals) < 1e-8)) != blocks
    ok = failures == 0 and mult_errors == 0
    record(5, "spectral recovery of block-diagonal affinities", ok,
           f"{trials} instances, {failures} imperfect, {mult_errors} wrong zero-eigenvalue multiplicities")
    assert ok


def test_criterion_6_synthetic_pipeline(tmp_path):
    start = time.perf_counter()
    code = cli.main(["run-all", "--out", str(tmp_path / "run"), *BLOBS_ARGS])
    elapsed = time.perf_counter() - start
    report = (tmp_path / "run" / cli.REPORT_FILE).read_text() if code == 0 else ""
    acc = float(report.split("acc_exact=")[1].split()[0]) if report else float("nan")
    ok = code == 0 and acc >= 0.95 and elapsed < 300
    record(6, "run-all on synthetic blobs reaches ACC >= 0.95", ok, f"exit {code}, acc {acc:.4f}, {elapsed:.1f}s")
    assert ok


def _windowed_decrease(values, window=10):
    values = np.asarray(values, dtype=float)
    if values.size < 2 * window:
        return bool(values[-1] < values[0])
    return bool(values[-window:].mean() < values[:window].mean())


def test_criterion_7_coil20(tmp_path):
    source = os.environ.get("UDLL_COIL20")
    if not source:
        record(7, "COIL-20 ACC >= 0.90", None, "UDLL_COIL20 not set; dataset unavailable offline")
        pytest.skip("set UDLL_COIL20 to a COIL-20 dataset to run this criterion")
    fmt = "pgm" if Path(source).is_dir() else "udlb"
    pre = os.environ.get("UDLL_COIL20_PRETRAIN", "1000")
    solver = os.environ.get("UDLL_COIL20_SOLVER", "jacobi")
    out = tmp_path / "coil20"
    start = time.perf_counter()
    code = cli.main(["run-all", "--out", str(out), "--dataset", source, "--format", fmt, "--pretrain-epochs", pre,
                     "--eigen-solver", solver, "--clusters", "20", "--config", str(_coil_config(tmp_path))])
    elapsed = time.perf_counter() - start
    acc = float("nan")
    trend = False
    if code == 0:
        acc = float((out / cli.REPORT_FILE).read_text().split("acc_exact=")[1].split()[0])
        pre_curve = np.loadtxt(out / cli.PRETRAIN_CSV, delimiter=",", skiprows=1, ndmin=2)[:, 1]
        ft_curve = np.loadtxt(out / cli.FINETUNE_CSV, delimiter=",", skiprows=1, ndmin=2)[:, 5]
        trend = _windowed_decrease(pre_curve) and _windowed_decrease(ft_curve)
    ok = code == 0 and acc >= 0.90 and trend
    record(7, "COIL-20 ACC >= 0.90", ok,
           f"exit {code}, acc {acc:.4f}, decreasing loss curves: {trend}, {elapsed:.0f}s")
    assert ok


def _coil_config(tmp_path):
    path = tmp_path / "coil20.txt"
    path.write_text("preset = coil20\nlearning_rate = 0.001\nseed = 0\n")
    return path


def test_criterion_8_determinism(tmp_path):
    dirs = [tmp_path / "first", tmp_path / "second"]
    codes = []
    for d in dirs:
        for stage in ("pretrain", "graph", "finetune", "cluster", "eval", "export-embedding"):
            codes.append(cli.main([stage, "--out", str(d), *BLOBS_ARGS]))
    names = sorted(p.name for p in dirs[0].iterdir())
    differing = [n for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
    required = {cli.PRETRAIN_CKPT, cli.FINETUNE_CKPT, cli.GRAPH_FILE, cli.W_FILE, cli.LABELS_FILE}
    ok = all(c == 0 for c in codes) and not differing and required <= set(names)
    record(8, "identical seeds give byte-identical artifacts", ok,
           f"{len(names)} files compared across two staged runs, differing: {differing or 'none'}")
    assert ok


def test_criterion_9_scale_invariance():
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(20):
        n, k = int(rng.integers(8, 60)), int(rng.choice([1, 3, 5]))
        Z = rng.normal(size=(int(rng.integers(2, 30)), n))
        a = build_prior_graph(Z, k).to_dense()
        b = build_prior_graph(3.7 * Z, k).to_dense()
        worst = max(worst, np.max(np.abs(a - b)))
    ok = worst <= 1e-10
    record(9, "graph weights invariant to scaling features by 3.7", ok, f"20 graphs, max |diff| {worst:.2e}")
    assert ok


if __name__ == "__main__":
    import tempfile

    for name, fn in list(globals().items()):
        if not name.startswith("test_criterion_"):
            continue
        with tempfile.TemporaryDirectory() as tmp:
            try:
                fn(Path(tmp)) if fn.__code__.co_argcount else fn()
            except (AssertionError, pytest.skip.Exception):
                pass
