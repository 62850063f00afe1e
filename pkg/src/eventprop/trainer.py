"""Training harness: runs, file formats, engine comparison, gradient and timing checks."""
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import yinyang
from .core import LayerParams, simulate_backward, simulate_forward
from .estimator import EventPropClassifier, MetricsRow
from .exceptions import DatasetParseError
from .fabric import Fabric
from .optim import adam_step
from .reference import ReferenceEngine

# -- files --------------------------------------------------------------


def save_weights(weights, path):
    """Write ``layer row col value`` lines; values round-trip exactly."""
    with open(path, "w") as f:
        for l, w in enumerate(weights):
            for (r, c), v in np.ndenumerate(w):
                f.write(f"{l} {r} {c} {float(v)!r}\n")


def load_weights(path, net_dims):
    weights = [np.zeros((n_out, n_in), dtype=np.float32)
               for n_in, n_out in zip(net_dims[:-1], net_dims[1:])]
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                l, r, c, v = line.split()
                weights[int(l)][int(r), int(c)] = np.float32(float(v))
            except (ValueError, IndexError) as exc:
                raise DatasetParseError(path, lineno, f"bad weight record: {exc}") from None
    return weights


def write_metrics(rows, path):
    with open(path, "w") as f:
        f.write(MetricsRow.HEADER + "\n")
        for row in rows:
            f.write(row.csv() + "\n")


def read_metrics(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != MetricsRow.HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            e, split, loss, acc, ms, guards, silent = line.strip().split(",")
            rows.append(MetricsRow(int(e), split, float(loss), float(acc),
                                   float(ms), int(guards), int(silent)))
    return rows


# -- datasets and estimators ----------------------------------------------


def load_datasets(cfg):
    train = yinyang.load_or_generate(cfg.train_path, cfg.n_train, cfg.data_seed,
                                     cfg.t_min, cfg.t_max)
    test = yinyang.load_or_generate(cfg.test_path, cfg.n_test, cfg.test_seed,
                                    cfg.t_min, cfg.t_max)
    return yinyang.to_arrays(train), yinyang.to_arrays(test)


def make_classifier(cfg, seed, trace=None):
    return EventPropClassifier(
        hidden_layer_sizes=tuple(cfg.net_dims[1:-1]), n_steps=cfg.n_steps, dt=cfg.dt,
        tau_s=cfg.tau_s, tau_m=cfg.tau_m, adjoint_variant=cfg.adjoint_variant,
        singularity_eps=cfg.singularity_eps, tau_0=cfg.tau_0, tau_1=cfg.tau_1,
        alpha_reg=cfg.alpha_reg, reg_sign=cfg.reg_sign, lr=cfg.lr, gamma=cfg.gamma,
        weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
        adam_eps=cfg.eps, grad_reduction=cfg.grad_reduction,
        decoupled_wd=cfg.decoupled_wd,
        init_scales=tuple(tuple(s) for s in cfg.init_scales),
        batch_size=cfg.batch_size, epochs=cfg.epochs, engine=cfg.engine,
        n_workers=cfg.n_workers, trace=trace, random_state=seed)


@dataclass
class SeedResult:
    seed: int
    train_accuracy: float
    test_accuracy: float
    history: list
    weights: list
    seconds: float


def train_seed(cfg, seed, data=None, out_dir=None):
    (X, y), (Xt, yt) = load_datasets(cfg) if data is None else data
    trace = open(cfg.trace_events, "w") if cfg.trace_events else None
    t0 = time.perf_counter()
    try:
        clf = make_classifier(cfg, seed, trace).fit(X, y, eval_set=(Xt, yt))
    finally:
        if trace is not None:
            trace.close()
    seconds = time.perf_counter() - t0
    train_acc, _ = clf.evaluate(X, y)
    test_acc = clf.history_[-1].accuracy
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(clf.history_, out / f"metrics_seed{seed}.csv")
        save_weights(clf.coefs_, out / f"weights_seed{seed}.txt")
    return SeedResult(seed, train_acc, test_acc, clf.history_, clf.coefs_, seconds)


def train(cfg, out_dir=None, log=print):
    """Train one network per seed; returns per-seed results and the median."""
    data = load_datasets(cfg)
    results = []
    for seed in cfg.seeds:
        r = train_seed(cfg, seed, data, out_dir if out_dir is not None else cfg.output_dir)
        results.append(r)
        if log:
            log(f"seed {seed}: train {r.train_accuracy:.4f} test {r.test_accuracy:.4f} "
                f"({r.seconds:.1f}s)")
    median = statistics.median(r.test_accuracy for r in results)
    if log:
        log(f"median test accuracy over {len(results)} seeds: {median:.4f}")
    return results, median


def evaluate(cfg, weights, X, y):
    """``(accuracy, mean_loss)`` of ``weights`` on a dataset, forward only."""
    engine = ReferenceEngine(cfg.layer_params(), cfg.loss_config())
    acc, loss, _ = engine.evaluate(weights, X, y)
    return acc, loss


# -- engine comparison ----------------------------------------------------


@dataclass
class RunRecord:
    """Per-sample trajectories and gradients plus per-batch weights."""
    losses: list = field(default_factory=list)
    rasters: list = field(default_factory=list)
    v: list = field(default_factory=list)
    i: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    weights: list = field(default_factory=list)


def record_run(cfg, weights, X, y, engine=None):
    """Train on ``X`` batch by batch, recording everything ``compare`` needs."""
    engine = engine or cfg.engine
    adam = cfg.adam_state()
    weights = [w.copy() for w in weights]
    rec = RunRecord()
    fabric = None
    if engine == "fabric":
        fabric = Fabric(cfg.net_dims, cfg.batch_size, cfg.layer_params(),
                        cfg.loss_config(), n_workers=cfg.n_workers,
                        n_total_systicks=cfg.n_total_systicks)
        fabric.scatter_weights(weights)
    else:
        ref = ReferenceEngine(cfg.layer_params(), cfg.loss_config())
    try:
        for start in range(0, len(X), cfg.batch_size):
            Xb, yb = X[start:start + cfg.batch_size], y[start:start + cfg.batch_size]
            if fabric is not None:
                results, _, adam, weights = fabric.train_batch(Xb, yb, adam, cfg.grad_reduction)
                for r in results:
                    rec.losses.append(r.loss)
                    rec.rasters.append([pe.state.spike_raster.copy() for pe in r.layers])
                    rec.v.append([pe.state.v_trace.copy() for pe in r.layers])
                    rec.i.append([pe.state.i_trace.copy() for pe in r.layers])
                    rec.lam.append([pe.adj.lam_trace.copy() for pe in r.layers])
                    rec.mu.append([pe.adj.mu_trace.copy() for pe in r.layers])
                    rec.grads.append(r.grads)
            else:
                results, grads = ref.run_batch(weights, Xb, yb, cfg.grad_reduction)
                adam, weights = adam_step(adam, grads, weights)
                for r in results:
                    rec.losses.append(r.loss)
                    rec.rasters.append(r.rasters[1:])
                    rec.v.append(r.v_traces)
                    rec.i.append(r.i_traces)
                    rec.lam.append(r.lam_traces)
                    rec.mu.append(r.mu_traces)
                    rec.grads.append(r.grads)
            rec.weights.append([w.copy() for w in weights])
    finally:
        if fabric is not None:
            fabric.close()
    return rec


def _max_dev(xs, ys):
    max_abs = max_rel = 0.0
    for a, b in zip(xs, ys):
        for la, lb in zip(a, b):
            la = np.asarray(la, dtype=np.float64)
            lb = np.asarray(lb, dtype=np.float64)
            if la.shape != lb.shape:
                raise ValueError(f"shape mismatch {la.shape} vs {lb.shape}")
            d = np.abs(la - lb)
            if d.size:
                max_abs = max(max_abs, float(d.max()))
                scale = np.maximum(np.abs(la), np.abs(lb))
                rel = np.divide(d, scale, out=np.zeros_like(d), where=scale > 0)
                max_rel = max(max_rel, float(rel.max()))
    return {"max_abs": max_abs, "max_rel": max_rel}


def compare(run_a, run_b, threshold=0.0):
    """Maximum absolute/relative deviations between two recorded runs."""
    if len(run_a.grads) != len(run_b.grads) or len(run_a.weights) != len(run_b.weights):
        raise ValueError("runs cover different numbers of samples or batches")
    report = {
        "v": _max_dev(run_a.v, run_b.v),
        "i": _max_dev(run_a.i, run_b.i),
        "lam": _max_dev(run_a.lam, run_b.lam),
        "mu": _max_dev(run_a.mu, run_b.mu),
        "grad": _max_dev(run_a.grads, run_b.grads),
        "weights": _max_dev(run_a.weights, run_b.weights),
        "loss": _max_dev([[run_a.losses]], [[run_b.losses]]),
    }
    raster_diff = sum(int(np.sum(ra != rb))
                      for sa, sb in zip(run_a.rasters, run_b.rasters)
                      for ra, rb in zip(sa, sb))
    report["raster_mismatches"] = raster_diff
    report["passed"] = raster_diff == 0 and all(
        v["max_abs"] <= threshold for k, v in report.items()
        if isinstance(v, dict))
    return report


def format_report(report):
    lines = []
    for key, val in report.items():
        if isinstance(val, dict):
            lines.append(f"{key:8s} max_abs={val['max_abs']:.3e} max_rel={val['max_rel']:.3e}")
        else:
            lines.append(f"{key:8s} {val}")
    return "\n".join(lines)


# -- gradient oracle ------------------------------------------------------


@dataclass
class GradCheckConfig:
    """A 1-input, 1-output network driven by one input spike.

    The loss is the physical first-spike time of the output neuron, so the
    error injected at that spike is exactly 1.
    """
    tau_s: float = 5.0
    tau_m: float = 20.0
    dt: float = 0.05
    n_steps: int = 600
    input_step: int = 0
    adjoint_variant: str = "exponential_euler"
    n_weights: int = 50
    w_span: tuple = (1.0, 4.0)
    guard_margin: float = 0.1
    refine: int = 100
    fd_rel_step: float = 1e-3
    rel_tol: float = 0.1
    min_fraction: float = 0.95


@njit(cache=True)
def _fine_spike_time(w, input_step, n_steps, dt, tau_s, tau_m, refine):
    # independent float64 integrator with linear threshold interpolation
    h = dt / refine
    a_i = math.exp(-h / tau_s)
    a_v = math.exp(-h / tau_m)
    i = 0.0
    v = 0.0
    n_in = input_step * refine
    for n in range(n_steps * refine):
        i = a_i * i + (w if n == n_in else 0.0)
        v_next = a_v * v + (1.0 - a_v) * i
        if v_next >= 1.0:
            return (n + (1.0 - v) / (v_next - v)) * h
        v = v_next
    return -1.0


def _adjoint_spike_gradient(w, tiny):
    """``(dt_spike/dw, first spike step)`` from the coarse adjoint pass."""
    p = LayerParams(tiny.tau_s, tiny.tau_m, tiny.dt, adjoint_variant=tiny.adjoint_variant)
    T = tiny.n_steps
    weights = (np.array([[w]], dtype=np.float32),)
    r_in = np.zeros((T + 1, 1), dtype=bool)
    r_in[tiny.input_step, 0] = True
    rasters = (r_in, np.zeros((T + 1, 1), dtype=bool))
    i_tr = (np.zeros((T + 1, 1), dtype=np.float32),)
    v_tr = (np.zeros((T + 1, 1), dtype=np.float32),)
    simulate_forward(weights, rasters, i_tr, v_tr, p.alpha_i, p.alpha_v, p.threshold)
    spikes = np.flatnonzero(rasters[1][:, 0])
    if spikes.size == 0:
        return None, None
    bracket = np.zeros((T + 1, 1), dtype=np.float32)
    bracket[spikes[0], 0] = 1.0
    lam = (np.zeros((T + 1, 1), dtype=np.float32),)
    mu = (np.zeros((T + 1, 1), dtype=np.float32),)
    grads = (np.zeros((1, 1), dtype=np.float32),)
    simulate_backward(weights, rasters, i_tr, v_tr, (bracket,), lam, mu, grads,
                      p.alpha_i, p.alpha_v, p.tau_s, p.threshold, p.singularity_eps,
                      p.variant_code)
    return float(grads[0][0, 0]), int(spikes[0])


def firing_boundary(tiny, lo=0.0, hi=1e3, iters=60):
    """Smallest weight at which the coarse output neuron fires (bisection)."""
    if _adjoint_spike_gradient(hi, tiny)[1] is None:
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _adjoint_spike_gradient(mid, tiny)[1] is None:
            lo = mid
        else:
            hi = mid
    return hi


def gradient_oracle_check(tiny=None):
    """Compare adjoint and fine-grid finite-difference spike-time gradients.

    Returns a report dict with one row per swept weight and the summary
    fields ``fraction_within``, ``sign_agreement``, ``n_used``, ``passed``
    and ``inconclusive``.
    """
    tiny = tiny or GradCheckConfig()
    w_min = firing_boundary(tiny)
    if w_min is None:
        return {"rows": [], "n_used": 0, "fraction_within": 0.0,
                "sign_agreement": 0.0, "passed": False, "inconclusive": True}
    rows = []
    for w in np.linspace(tiny.w_span[0] * w_min, tiny.w_span[1] * w_min, tiny.n_weights):
        w = float(np.float32(w))
        adj, step = _adjoint_spike_gradient(w, tiny)
        h = tiny.fd_rel_step * w
        t_plus = _fine_spike_time(w + h, tiny.input_step, tiny.n_steps, tiny.dt,
                                  tiny.tau_s, tiny.tau_m, tiny.refine)
        t_minus = _fine_spike_time(w - h, tiny.input_step, tiny.n_steps, tiny.dt,
                                   tiny.tau_s, tiny.tau_m, tiny.refine)
        row = {"w": w, "adjoint": adj, "spike_step": step, "oracle": None,
               "rel_err": None, "sign_ok": None,
               "near_singular": w < (1.0 + tiny.guard_margin) * w_min}
        if adj is not None and t_plus >= 0 and t_minus >= 0:
            fd = (t_plus - t_minus) / (2 * h)
            row["oracle"] = fd
            row["rel_err"] = abs(adj - fd) / abs(fd) if fd != 0 else math.inf
            row["sign_ok"] = bool(np.sign(adj) == np.sign(fd))
        else:
            row["near_singular"] = True
        rows.append(row)
    used = [r for r in rows if not r["near_singular"]]
    if not used:
        return {"rows": rows, "n_used": 0, "fraction_within": 0.0,
                "sign_agreement": 0.0, "passed": False, "inconclusive": True}
    within = sum(r["rel_err"] <= tiny.rel_tol for r in used) / len(used)
    signs = sum(r["sign_ok"] for r in used) / len(used)
    return {"rows": rows, "w_min": w_min, "n_used": len(used),
            "fraction_within": within, "sign_agreement": signs,
            "passed": within >= tiny.min_fraction and signs == 1.0,
            "inconclusive": False}


# -- profiling ------------------------------------------------------------


def profile(cfg, batch_sizes=None, n_batches=3, X=None, y=None):
    """Tick counts and wall time per batch on the fabric for each batch size."""
    if X is None:
        X, y = yinyang.to_arrays(yinyang.make_dataset(
            max(batch_sizes or [cfg.batch_size]) * n_batches * 2, cfg.data_seed,
            cfg.t_min, cfg.t_max))
    batch_sizes = batch_sizes or [cfg.batch_size]
    rng = np.random.default_rng(cfg.seeds[0])
    clf = make_classifier(cfg, cfg.seeds[0])
    clf._initialize(X[:1], np.arange(cfg.net_dims[-1]))
    report = {"n_steps": cfg.n_steps, "expected_ticks": 2 * cfg.n_steps + 2, "runs": []}
    for bs in batch_sizes:
        fabric = Fabric(cfg.net_dims, bs, cfg.layer_params(), cfg.loss_config(),
                        n_workers=cfg.n_workers, n_total_systicks=cfg.n_total_systicks)
        fabric.scatter_weights(clf.coefs_)
        times, ticks = [], set()
        try:
            # untimed warm-up: thread pool start and kernel dispatch
            fabric.run_batch(X[:bs], y[:bs])
            for _ in range(n_batches):
                idx = rng.choice(len(X), size=bs, replace=False)
                t0 = time.perf_counter()
                fabric.run_batch(X[idx], y[idx])
                times.append(1000.0 * (time.perf_counter() - t0))
                ticks.add(fabric.ticks_last_sample)
        finally:
            fabric.close()
        report["runs"].append({
            "batch_size": bs, "ticks_per_sample": sorted(ticks),
            "ms_per_batch_mean": statistics.fmean(times),
            "ms_per_batch_std": statistics.pstdev(times),
            "ms_per_sample": statistics.fmean(times) / bs})
    return report
