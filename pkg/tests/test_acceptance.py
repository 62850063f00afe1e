"""Acceptance suite: one test and one summary line per criterion.

Criterion 1 trains five full networks and takes a few minutes.
"""
import statistics
import time

import numpy as np
import pytest

from eventprop import trainer
from eventprop.config import RunConfig
from eventprop.core import init_weights
from eventprop.loss import FirstSpikeRecord, LossConfig, loss_gradient, record_spike
from eventprop.optim import combine
from eventprop.reference import ReferenceEngine

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def datasets():
    return trainer.load_datasets(RunConfig())


def random_weights(cfg, seed):
    rng = np.random.default_rng(seed)
    return [init_weights(a, b, s_mu, s_sigma, rng)
            for (a, b), (s_mu, s_sigma)
            in zip(zip(cfg.net_dims[:-1], cfg.net_dims[1:]), cfg.init_scales)]


def test_c1_batch_training(datasets, acceptance_report):
    cfg = RunConfig(seeds=SEEDS)
    results = [trainer.train_seed(cfg, s, datasets) for s in cfg.seeds]
    accs = [r.test_accuracy for r in results]
    median = statistics.median(accs)
    progress = all(
        [row.loss for row in r.history if row.split == "train"][-1]
        < [row.loss for row in r.history if row.split == "train"][0] for r in results)
    slowest = max(r.seconds for r in results)
    passed = median >= 0.90 and min(accs) >= 0.70 and progress and slowest <= 600
    acceptance_report(
        1, passed,
        f"test accuracy per seed {[round(a, 4) for a in accs]}, median {median:.4f} "
        f"(>= 0.90), min {min(accs):.4f} (>= 0.70), train loss decreased: {progress}, "
        f"slowest seed {slowest:.0f}s ({cfg.adjoint_variant})")
    assert passed


def test_c2_online_regime(datasets, acceptance_report):
    (X, y), (Xt, yt) = datasets
    cfg = RunConfig(batch_size=1, epochs=1, seeds=SEEDS)
    online = ((X[:300], y[:300]), (Xt, yt))
    accs = [trainer.train_seed(cfg, s, online).test_accuracy for s in cfg.seeds]
    median = statistics.median(accs)
    passed = median >= 0.50
    acceptance_report(2, passed, f"300 samples, batch 1: per seed "
                                 f"{[round(a, 4) for a in accs]}, median {median:.4f} (>= 0.50)")
    assert passed


def test_c3_fabric_reference_equivalence(datasets, acceptance_report):
    (X, y), _ = datasets
    idx = np.random.default_rng(3).choice(len(X), size=100, replace=False)
    cfg = RunConfig(n_workers=4)
    w = random_weights(cfg, 11)
    ref = trainer.record_run(cfg, w, X[idx], y[idx], "reference")
    fab = trainer.record_run(cfg, w, X[idx], y[idx], "fabric")
    rep = trainer.compare(ref, fab, threshold=0.0)
    worst = max(v["max_abs"] for v in rep.values() if isinstance(v, dict))
    acceptance_report(3, rep["passed"],
                      f"100 samples in batches of 22: raster mismatches "
                      f"{rep['raster_mismatches']}, largest deviation over V/I/lambda/mu/"
                      f"grad/weights/loss {worst:.1e}")
    assert rep["passed"]


def test_c4_gradient_oracle(acceptance_report):
    t0 = time.perf_counter()
    rep = trainer.gradient_oracle_check()
    alt = trainer.gradient_oracle_check(
        trainer.GradCheckConfig(adjoint_variant="jump_first"))
    seconds = time.perf_counter() - t0
    passed = rep["passed"] and alt["passed"] and seconds <= 60
    acceptance_report(
        4, passed,
        f"{rep['n_used']} weights outside guard: {rep['fraction_within']:.1%} within 10%, "
        f"sign agreement {rep['sign_agreement']:.0%} (exponential_euler); "
        f"{alt['fraction_within']:.1%} / {alt['sign_agreement']:.0%} (jump_first); "
        f"{seconds:.1f}s")
    assert passed


def test_c5_loss_zero_sum(acceptance_report):
    cfg = LossConfig(alpha_reg=0.0)
    rng = np.random.default_rng(5)
    worst = 0.0
    for steps in rng.integers(0, cfg.n_steps, size=(10_000, 3)):
        rec = FirstSpikeRecord(3, int(rng.integers(3)))
        for k, s in enumerate(steps):
            record_spike(rec, k, int(s))
        worst = max(worst, abs(loss_gradient(rec, cfg).sum()))
    passed = worst <= 1e-9
    acceptance_report(5, passed, f"max |sum of errors| over 1e4 triples = {worst:.2e}")
    assert passed


def test_c6_batch_linearity(datasets, acceptance_report):
    (X, y), _ = datasets
    cfg = RunConfig()
    engine = ReferenceEngine(cfg.layer_params(), cfg.loss_config())
    rng = np.random.default_rng(6)
    mismatches = 0
    for b in range(100):
        idx = rng.choice(len(X), size=22, replace=False)
        w = random_weights(cfg, 100 + b)
        results, grads = engine.run_batch(w, X[idx], y[idx])
        singles = [engine.run_sample(w, X[i], int(y[i])).grads for i in idx]
        expected = combine(singles)
        mismatches += sum(int(np.sum(g != e)) for g, e in zip(grads, expected))
    passed = mismatches == 0
    acceptance_report(6, passed, f"100 batches of 22: {mismatches} differing gradient entries")
    assert passed


def test_c7_worker_determinism(datasets, acceptance_report):
    (X, y), _ = datasets
    cfg = RunConfig()
    idx = np.random.default_rng(7).permutation(len(X))[:220]
    w = random_weights(cfg, 7)
    single = trainer.record_run(cfg.replace(n_workers=1), w, X[idx], y[idx], "fabric")
    multi = trainer.record_run(cfg.replace(n_workers=4), w, X[idx], y[idx], "fabric")
    differ = sum(int(np.sum(a != b)) for a, b in zip(single.weights[-1], multi.weights[-1]))
    passed = differ == 0 and len(single.weights) == 10
    acceptance_report(7, passed, f"10 batches, 1 vs 4 workers: {differ} differing final weights")
    assert passed


def test_c8_ticks_per_sample(acceptance_report):
    rep = trainer.profile(RunConfig(), batch_sizes=[1, 22], n_batches=2)
    ticks = [r["ticks_per_sample"] for r in rep["runs"]]
    passed = ticks == [[58], [58]] and rep["expected_ticks"] == 58
    acceptance_report(8, passed, f"ticks per sample at T=28 for batch 1 and 22: {ticks} "
                                 f"(expected 58)")
    assert passed
