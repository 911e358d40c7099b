"""Acceptance suite: one PASS/FAIL line per criterion, at its pinned tolerance."""

import time

import numpy as np
import pytest

from _util import balanced_labels, central_diff, random_batch, rel_err
from nullhead.head import head_grad, head_loss
from nullhead.inference import fit, predict
from nullhead.network import LayerSpec, Network
from nullhead.scatter import LabeledBatch, scatters
from nullhead.training import TrainConfig, run_train

# blobs C=5, D_in=20, 500 train / 500 test, spread 1.0, data seed 7
ACCEPTANCE_RUN = dict(
    blobs_classes=5,
    blobs_dim=20,
    blobs_per_class=200,
    blobs_spread=1.0,
    data_seed=7,
    test_fraction=0.5,
    arch="mlp-small",
    feature_dim=16,
    lr=1e-3,
    batch_size=128,
    epochs=200,
    epsilon=1.0,
    seed=7,
)


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail, seconds):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\n[{status}] criterion {number:>2}: {name}: {detail} ({seconds:.2f} s)")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(key):
        if key not in cache:
            head, rep = key
            cfg = TrainConfig(**ACCEPTANCE_RUN, head=head, out=str(base / f"{head}{rep}"))
            start = time.perf_counter()
            res = run_train(cfg)
            cache[key] = (res, time.perf_counter() - start)
        return cache[key]

    return get


def _sss_batch(rng):
    """Batch with N <= D, where the within-class nullspace is available."""
    c = int(rng.integers(2, 8))
    n = int(rng.integers(2 * c, 4 * c + 1))
    d = int(rng.integers(n, 48))
    return random_batch(rng, d, n, c, spread=float(rng.uniform(0.2, 2.0)))


def test_c01_scatter_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(500):
        c = int(rng.integers(2, 11))
        b = random_batch(rng, int(rng.integers(1, 33)), int(rng.integers(2 * c, 201)), c)
        sc = scatters(b)
        worst = max(worst, np.linalg.norm(sc.s_t - sc.s_w - sc.s_b) / np.linalg.norm(sc.s_t))
    secs = time.perf_counter() - start
    report(1, "scatter identity", worst <= 1e-10 and secs < 5,
           f"max relative residual {worst:.2e} <= 1e-10 over 500 batches", secs)


def test_c02_nullspace_constraints(report):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_w, min_b = 0.0, np.inf
    for _ in range(200):
        b = _sss_batch(rng)
        _, state = head_loss(b)
        sc = scatters(b)
        p = state.projection
        worst_w = max(worst_w, np.abs(p.T @ sc.s_w @ p).max() / np.linalg.norm(sc.s_w))
        min_b = min(min_b, np.diag(p.T @ sc.s_b @ p).min())
    secs = time.perf_counter() - start
    ok = worst_w <= 1e-6 and min_b > 0 and secs < 10
    report(2, "nullspace constraints", ok,
           f"max|P'SwP|/|Sw| = {worst_w:.2e} <= 1e-6, min diag P'SbP = {min_b:.3g} > 0", secs)


def _frozen_objective(batch, state):
    a = state.reduced.u1 @ state.lifted_vectors[:, state.selected]
    e0 = state.eig_values[state.selected]

    def g():
        sc = scatters(batch)
        return -float(sum(ai @ sc.s_b @ ai - ei * ai @ sc.s_w @ ai for ai, ei in zip(a.T, e0)))

    return g


def test_c03_gradient_check(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        b = random_batch(np.random.default_rng(300 + seed), 8, 30, 3)
        _, state = head_loss(b)
        worst = max(worst, rel_err(head_grad(b, state), central_diff(_frozen_objective(b, state), b.features)))

    # end to end through a 2-layer dense network
    rng = np.random.default_rng(399)
    net = Network([LayerSpec("dense", (6, 10)), LayerSpec("relu"), LayerSpec("dense", (10, 8))], (6,), seed=1)
    x = rng.normal(size=(6, 30))
    labels = balanced_labels(30, 3, rng)
    feats, caches = net.forward(x)
    batch = LabeledBatch(feats, labels, 3)
    _, state = head_loss(batch)

    def g():
        return _frozen_objective(LabeledBatch(net.forward(x)[0], labels, 3), state)()

    grads, _ = net.backward(caches, head_grad(batch, state))
    params = net.parameters()
    analytic = np.concatenate([grads[k].ravel() for k in params])
    numeric = np.concatenate([central_diff(g, p).ravel() for p in params.values()])
    e2e = rel_err(analytic, numeric)
    secs = time.perf_counter() - start
    ok = worst <= 1e-6 and e2e <= 1e-5 and secs < 60
    report(3, "gradient check", ok,
           f"feature gradient max rel err {worst:.2e} <= 1e-6 (50 seeds), "
           f"network parameters {e2e:.2e} <= 1e-5", secs)


def _descent_wins(seed0, shape, **kw):
    wins = 0
    for seed in range(100):
        b = random_batch(np.random.default_rng(seed0 + seed), *shape)
        loss, state = head_loss(b, **kw)
        stepped = LabeledBatch(b.features - 1e-3 * head_grad(b, state), b.labels, b.num_classes)
        wins += head_loss(stepped, **kw)[0] < loss
    return wins


def test_c04_descent(report):
    start = time.perf_counter()
    # smallest-eigenvalue substitute basis at D=8, N=30, C=3 (N > D)
    substitute = _descent_wins(400, (8, 30, 3), fallback="smallest")
    # default head where the exact nullspace exists (N <= D)
    exact = _descent_wins(500, (20, 12, 3))
    secs = time.perf_counter() - start
    ok = substitute >= 95 and exact >= 95 and secs < 30
    report(4, "descent property", ok,
           f"{substitute}/100 (D=8 N=30 C=3) and {exact}/100 (D=20 N=12 C=3), need >= 95", secs)


def test_c05_classifier_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    agree = total = 0
    for _ in range(20):
        b = _sss_batch(rng)
        _, state = head_loss(b)
        model = fit(b.features, b.labels, state)
        q = b.features.mean(axis=1, keepdims=True) + 2 * b.features.std() * rng.normal(size=(b.dim, 50))
        p = model.projection
        dist = ((p.T @ q)[:, None, :] - (p.T @ model.class_means)[:, :, None]) ** 2
        oracle = np.argmin(dist.sum(axis=0), axis=0)
        agree += int(np.sum(predict(model, q) == oracle))
        total += q.shape[1]
    secs = time.perf_counter() - start
    report(5, "classifier oracle", agree == total == 1000 and secs < 10,
           f"{agree}/{total} decisions match nearest projected mean", secs)


@pytest.mark.slow
def test_c06_trace_ratio(report, runs):
    res, secs = runs(("nullspace", 1))
    ratio = res.metrics[-1].fisher_trace_ratio
    report(6, "train trace ratio", ratio < 0.05 and secs < 300,
           f"tr(Sw)/tr(St) = {ratio:.4f} < 0.05 after {len(res.metrics)} epochs", secs)


@pytest.mark.slow
def test_c07_accuracy_non_inferiority(report, runs):
    ns, t1 = runs(("nullspace", 1))
    sm, t2 = runs(("softmax", 1))
    a, b = ns.report.accuracy, sm.report.accuracy
    ok = a >= b - 0.02 and a >= 0.95 and t1 + t2 < 600
    report(7, "accuracy non-inferiority", ok,
           f"nullspace {a:.3f} vs softmax {b:.3f} (>= softmax - 0.02 and >= 0.95)", t1 + t2)


def test_c08_parameter_counts(report, runs):
    start = time.perf_counter()
    ok = True
    seen = []
    for c, d in ((2, 3), (3, 8), (5, 16), (7, 12)):
        cfg = dict(blobs_classes=c, blobs_dim=6, blobs_per_class=30, feature_dim=d,
                   batch_size=max(4, 4 * c), epochs=1)
        ns = run_train(TrainConfig(**cfg), write=False).report.extra
        sm = run_train(TrainConfig(**cfg, head="softmax"), write=False).report.extra
        ok &= ns["head_params"] == 0 and sm["head_params"] == d * c + c
        ok &= ns["backbone_params"] == sm["backbone_params"]
        seen.append(f"D={d},C={c}: 0 vs {sm['head_params']}")
    secs = time.perf_counter() - start
    report(8, "head parameter counts", ok, "; ".join(seen), secs)


@pytest.mark.slow
def test_c09_top_k(report, runs):
    start = time.perf_counter()
    reports = [runs(("nullspace", 1))[0], runs(("softmax", 1))[0]]
    ok = True
    checked = 0
    for res in reports:
        r = res.report
        n = r.num_samples
        # top-1 misses and hits are counts over the same n samples
        ok &= r.top_k_errors[5] == 0.0
        ok &= round(r.top_k_errors[1] * n) + round(r.accuracy * n) == n
        ok &= abs(r.top_k_errors[1] - (1.0 - r.accuracy)) <= 1e-12
        for m in res.metrics:
            ok &= m.top5_error == 0.0
            ok &= round(m.top1_error * n) + round(m.eval_accuracy * n) == n
        checked += 1 + len(res.metrics)
    secs = time.perf_counter() - start
    report(9, "top-k metrics", ok, f"top-5 error 0 and top-1 = 1 - accuracy on {checked} evaluations", secs)


@pytest.mark.slow
def test_c10_determinism(report, runs):
    a, t1 = runs(("nullspace", 1))
    b, t2 = runs(("nullspace", 2))
    same = (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()
    report(10, "determinism", same, "metrics.csv byte-identical across two seeded runs", t1 + t2)
