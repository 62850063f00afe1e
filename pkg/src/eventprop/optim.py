"""Gradient combination and Adam with weight decay, run by the control node."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

REDUCTIONS = ("sum", "mean")


def combine(gradient_sets, mode="sum"):
    """Elementwise reduction of per-replica gradient lists.

    ``gradient_sets[b][l]`` is replica b's gradient for layer l. Replicas
    are added in ascending index order in float32.
    """
    if mode not in REDUCTIONS:
        raise ConfigurationError(f"grad_reduction must be one of {REDUCTIONS}")
    if len(gradient_sets) == 0:
        raise ConfigurationError("combine needs at least one gradient set")
    first = gradient_sets[0]
    total = [np.array(g, dtype=np.float32, copy=True) for g in first]
    for b, gs in enumerate(gradient_sets[1:], start=1):
        if len(gs) != len(total):
            raise ValueError(f"replica {b} has {len(gs)} layers, expected {len(total)}")
        for l, g in enumerate(gs):
            if g.shape != total[l].shape:
                raise ValueError(
                    f"replica {b} layer {l}: shape {g.shape} != {total[l].shape}")
            total[l] += g.astype(np.float32, copy=False)
    if mode == "mean":
        n = np.float32(len(gradient_sets))
        total = [t / n for t in total]
    return total


@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 6.5e-7
    gamma: float = 0.93
    decoupled_wd: bool = False
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")

    def copy(self):
        out = AdamState(self.lr, self.beta1, self.beta2, self.eps,
                        self.weight_decay, self.gamma, self.decoupled_wd,
                        self.step_count)
        out.m = [a.copy() for a in self.m]
        out.v = [a.copy() for a in self.v]
        return out


def adam_step(state, grads, weights):
    """One bias-corrected Adam update. Returns ``(new_state, new_weights)``.

    Neither input is modified. Moments are kept in float64; weights come
    back as float32.
    """
    if len(grads) != len(weights):
        raise ValueError("grads and weights have different layer counts")
    new = state.copy()
    if not new.m:
        new.m = [np.zeros(w.shape) for w in weights]
        new.v = [np.zeros(w.shape) for w in weights]
    t = new.step_count + 1
    corr1 = 1.0 - new.beta1 ** t
    corr2 = 1.0 - new.beta2 ** t
    out = []
    for l, (g, w) in enumerate(zip(grads, weights)):
        g = np.asarray(g, dtype=np.float64)
        w64 = np.asarray(w, dtype=np.float64)
        if g.shape != w64.shape:
            raise ValueError(f"layer {l}: gradient shape {g.shape} != weight shape {w64.shape}")
        bad = np.argwhere(~np.isfinite(g))
        if bad.size:
            raise FloatingPointError(
                f"non-finite gradient in layer {l} at index {tuple(int(i) for i in bad[0])}")
        if not new.decoupled_wd:
            g = g + new.weight_decay * w64
        m = new.beta1 * new.m[l] + (1.0 - new.beta1) * g
        v = new.beta2 * new.v[l] + (1.0 - new.beta2) * g * g
        update = new.lr * (m / corr1) / (np.sqrt(v / corr2) + new.eps)
        if new.decoupled_wd:
            update = update + new.lr * new.weight_decay * w64
        new.m[l], new.v[l] = m, v
        out.append(np.ascontiguousarray(w64 - update, dtype=np.float32))
    new.step_count = t
    return new, out


def epoch_decay(state):
    new = state.copy()
    new.lr = state.lr * state.gamma
    return new
