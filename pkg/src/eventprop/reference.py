"""Single-process dense engine: the oracle the event fabric is checked against."""
from dataclasses import dataclass, field

import numpy as np

from . import loss as ttfs
from .core import simulate_backward, simulate_forward
from .optim import combine
from .validation import input_raster


@dataclass
class SampleResult:
    loss: float
    prediction: int
    grads: list
    guards: int = 0
    n_silent: int = 0
    rasters: list = field(default_factory=list)
    i_traces: list = field(default_factory=list)
    v_traces: list = field(default_factory=list)
    lam_traces: list = field(default_factory=list)
    mu_traces: list = field(default_factory=list)


class ReferenceEngine:
    """Runs whole trials layer by layer with dense recorded trajectories.

    Parameters
    ----------
    params : LayerParams
        Neuron constants shared by every layer.
    loss_cfg : LossConfig
        Output loss configuration; ``loss_cfg.n_steps`` sets the trial length.
    """

    def __init__(self, params, loss_cfg):
        self.params = params
        self.loss_cfg = loss_cfg

    @property
    def n_steps(self):
        return self.loss_cfg.n_steps

    def forward(self, weights, steps):
        T = self.n_steps
        weights = tuple(weights)
        rasters = (input_raster(steps, T),) + tuple(
            np.zeros((T + 1, w.shape[0]), dtype=bool) for w in weights)
        i_traces = tuple(np.zeros((T + 1, w.shape[0]), dtype=np.float32) for w in weights)
        v_traces = tuple(np.zeros((T + 1, w.shape[0]), dtype=np.float32) for w in weights)
        p = self.params
        simulate_forward(weights, rasters, i_traces, v_traces,
                         p.alpha_i, p.alpha_v, p.threshold)
        return rasters, i_traces, v_traces

    def run_sample(self, weights, steps, label, backward=True):
        T = self.n_steps
        rasters, i_traces, v_traces = self.forward(weights, steps)
        rec = ttfs.record_raster(ttfs.FirstSpikeRecord(self.loss_cfg.n_classes, label),
                                 rasters[-1])
        result = SampleResult(
            loss=ttfs.compute_loss(rec, self.loss_cfg),
            prediction=ttfs.predict(rec),
            grads=[],
            n_silent=rec.n_silent,
            rasters=list(rasters), i_traces=list(i_traces), v_traces=list(v_traces))
        if not backward:
            return result
        weights = tuple(weights)
        signals = ttfs.compute_error_signals(rec, self.loss_cfg)
        brackets = tuple(np.zeros((T + 1, w.shape[0]), dtype=np.float32)
                         for w in weights[:-1]) + (ttfs.error_bracket(signals, T),)
        lam = tuple(np.zeros((T + 1, w.shape[0]), dtype=np.float32) for w in weights)
        mu = tuple(np.zeros((T + 1, w.shape[0]), dtype=np.float32) for w in weights)
        grads = tuple(np.zeros(w.shape, dtype=np.float32) for w in weights)
        p = self.params
        result.guards = simulate_backward(
            weights, rasters, i_traces, v_traces, brackets, lam, mu, grads,
            p.alpha_i, p.alpha_v, p.tau_s, p.threshold, p.singularity_eps,
            p.variant_code)
        result.grads = list(grads)
        result.lam_traces = list(lam)
        result.mu_traces = list(mu)
        return result

    def run_batch(self, weights, X, y, grad_reduction="sum"):
        """Per-sample results and their fixed-order combined gradient."""
        results = [self.run_sample(weights, X[b], int(y[b])) for b in range(len(X))]
        return results, combine([r.grads for r in results], grad_reduction)

    def evaluate(self, weights, X, y):
        """Return ``(accuracy, mean_loss, n_silent)`` from forward passes only."""
        correct, total_loss, silent = 0, 0.0, 0
        for b in range(len(X)):
            r = self.run_sample(weights, X[b], int(y[b]), backward=False)
            correct += r.prediction == int(y[b])
            total_loss += r.loss
            silent += r.n_silent
        n = max(len(X), 1)
        return correct / n, total_loss / n, silent
