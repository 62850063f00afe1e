"""Time-to-first-spike cross-entropy loss over output neurons."""
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ProtocolError

ABSTAIN = -1


@dataclass(frozen=True)
class LossConfig:
    tau_0: float = 1.5
    tau_1: float = 100.0
    alpha_reg: float = 0.01
    dt: float = 1.0
    n_classes: int = 3
    n_steps: int = 28
    # -1 reproduces the regulariser sign "- alpha * (exp(t/tau_1) - 1)".
    reg_sign: float = -1.0

    def __post_init__(self):
        if not self.tau_0 > 0 or not self.tau_1 > 0:
            raise ConfigurationError("tau_0 and tau_1 must be positive")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be >= 1")
        if self.reg_sign not in (-1, 1, -1.0, 1.0):
            raise ConfigurationError("reg_sign must be +1 or -1")


class FirstSpikeRecord:
    """Earliest spike step of each output neuron, ``None`` while silent."""

    def __init__(self, n_classes, label):
        if not 0 <= label < n_classes:
            raise ConfigurationError(f"label {label} outside [0, {n_classes})")
        self.label = int(label)
        self.first_step = [None] * n_classes

    def __repr__(self):
        return f"FirstSpikeRecord(first_step={self.first_step}, label={self.label})"

    def resolved_steps(self, n_steps):
        """First steps with silent neurons mapped to the final step."""
        return np.array([n_steps if s is None else s for s in self.first_step],
                        dtype=np.float64)

    @property
    def n_silent(self):
        return sum(s is None for s in self.first_step)


def record_spike(rec, neuron, step):
    if not 0 <= neuron < len(rec.first_step):
        raise ProtocolError(f"output neuron {neuron} outside [0, {len(rec.first_step)})")
    if step < 0:
        raise ProtocolError(f"negative spike step {step}")
    if rec.first_step[neuron] is None:
        rec.first_step[neuron] = int(step)
    return rec


def record_raster(rec, raster):
    """Record every spike of a ``(T+1, n_classes)`` output raster."""
    steps, neurons = np.nonzero(raster)
    for t, k in zip(steps, neurons):
        record_spike(rec, int(k), int(t))
    return rec


def _log_softmax_parts(times, cfg):
    z = -times * cfg.dt / cfg.tau_0
    zmax = z.max()
    logsum = zmax + np.log(np.exp(z - zmax).sum())
    return z, logsum


def compute_loss(rec, cfg):
    times = rec.resolved_steps(cfg.n_steps)
    z, logsum = _log_softmax_parts(times, cfg)
    t_label = times[rec.label] * cfg.dt
    reg = cfg.alpha_reg * (np.exp(t_label / cfg.tau_1) - 1.0)
    return float(logsum - z[rec.label] + cfg.reg_sign * reg)


def loss_gradient(rec, cfg):
    """dL/d(t_k * dt) for every output neuron, silent ones included."""
    times = rec.resolved_steps(cfg.n_steps)
    z, logsum = _log_softmax_parts(times, cfg)
    p = np.exp(z - logsum)
    g = -p / cfg.tau_0
    g[rec.label] += 1.0 / cfg.tau_0
    t_label = times[rec.label] * cfg.dt
    g[rec.label] += cfg.reg_sign * cfg.alpha_reg / cfg.tau_1 * np.exp(t_label / cfg.tau_1)
    return g


def compute_error_signals(rec, cfg):
    """Per-neuron ``[(step, value)]`` pairs, attached at first-spike steps.

    Silent neurons get an empty list. Values are float32, the payload width
    of an error packet.
    """
    g = loss_gradient(rec, cfg)
    signals = []
    for k, step in enumerate(rec.first_step):
        if step is None:
            signals.append([])
        else:
            signals.append([(step, np.float32(g[k]))])
    return signals


def error_bracket(signals, n_steps):
    """Dense ``(T+1, n_classes)`` float32 array of the error signals."""
    out = np.zeros((n_steps + 1, len(signals)), dtype=np.float32)
    for k, pairs in enumerate(signals):
        for step, value in pairs:
            out[step, k] = value
    return out


def predict(rec):
    """Index of the earliest-firing neuron; lowest index wins ties.

    Returns ``ABSTAIN`` when no output neuron fired.
    """
    best = ABSTAIN
    best_step = None
    for k, step in enumerate(rec.first_step):
        if step is not None and (best_step is None or step < best_step):
            best, best_step = k, step
    return best
