"""
Discretized leaky integrate-and-fire layer with adjoint backward pass.

Forward dynamics per neuron j of a layer, for steps t = 0 .. T-1::

    I[t+1] = a_i * I[t] + sum_{k spiking at t} W[j, k]
    V[t+1] = a_v * V[t] * (1 - H(V[t] - 1)) + (1 - a_v) * I[t+1]

Backward (adjoint) dynamics run from t = T-1 down to 0 with lam[T] = mu[T] = 0.
With the spike jump J = H(V[t+1] - 1) * (mu[t+1] + b[t+1]) / (I[t+1] - V[t+1])::

    mu[t]  = a_v * mu[t+1] + J                             (exponential_euler, default)
    lam[t] = a_i * lam[t+1] + (1 - a_i) * mu[t+1]

    mu[t]  = a_v * (mu[t+1] + J)                           (jump_first)
    lam[t] = a_i * lam[t+1] + (1 - a_i) * (mu[t+1] + J)

    mu[t]  = a_v * mu[t+1] + J                             (as_printed)
    lam[t] = a_i * mu[t+1] + (1 - a_i) * lam[t+1]

where b[t+1] is the error delivered from downstream for step t+1. jump_first
applies the jump before propagating, so a spike one step after its input
still produces a gradient; the other two lag by one step. J is zero when
|I - V| < singularity_eps, and the guard counter records it. At every step
t where presynaptic neuron k spiked, G[j, k] -= tau_s * lam[t, j] and the value
sum_j W[j, k] * (mu[t, j] - lam[t, j]) is sent upstream for neuron k.

All state lives in float32. Each kernel accumulates in float64 and rounds to
float32 when a step completes, and every engine in this package calls the same
compiled kernels, so their results agree bit for bit.
"""
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import ConfigurationError, ProtocolError

THRESHOLD = 1.0

ADJOINT_VARIANTS = {"exponential_euler": 0, "as_printed": 1, "jump_first": 2}


def decay_factors(tau_s, tau_m, dt):
    """Return ``(alpha_i, alpha_v) = (exp(-dt/tau_s), exp(-dt/tau_m))``."""
    if not tau_s > 0 or not tau_m > 0:
        raise ConfigurationError(
            f"time constants must be positive, got tau_s={tau_s}, tau_m={tau_m}")
    if dt < 0:
        raise ConfigurationError(f"dt must be non-negative, got {dt}")
    return math.exp(-dt / tau_s), math.exp(-dt / tau_m)


@dataclass(frozen=True)
class LayerParams:
    tau_s: float = 5.0
    tau_m: float = 20.0
    dt: float = 1.0
    threshold: float = THRESHOLD
    adjoint_variant: str = "exponential_euler"
    singularity_eps: float = 1e-6

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        decay_factors(self.tau_s, self.tau_m, self.dt)
        if self.adjoint_variant not in ADJOINT_VARIANTS:
            raise ConfigurationError(
                f"unknown adjoint_variant {self.adjoint_variant!r}; "
                f"expected one of {sorted(ADJOINT_VARIANTS)}")
        if self.singularity_eps < 0:
            raise ConfigurationError("singularity_eps must be >= 0")

    @property
    def alpha_i(self):
        return decay_factors(self.tau_s, self.tau_m, self.dt)[0]

    @property
    def alpha_v(self):
        return decay_factors(self.tau_s, self.tau_m, self.dt)[1]

    @property
    def variant_code(self):
        return ADJOINT_VARIANTS[self.adjoint_variant]


# --------------------------------------------------------------------------
# Compiled kernels. Summation order is fixed: ascending presynaptic index in
# the forward pass, ascending postsynaptic index in the backward pass.
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def forward_kernel(i, v, w, presyn, alpha_i, alpha_v, threshold, out_spikes):
    """Advance ``i`` and ``v`` in place by one step.

    ``presyn`` holds sorted presynaptic indices that spiked at the current
    step. Indices of neurons that cross threshold are written to
    ``out_spikes``; the return value is their count.
    """
    count = 0
    for j in range(i.shape[0]):
        acc = alpha_i * np.float64(i[j])
        for idx in range(presyn.shape[0]):
            acc += np.float64(w[j, presyn[idx]])
        i_new = np.float32(acc)
        vj = np.float64(v[j])
        leak = 0.0
        if vj < threshold:
            leak = alpha_v * vj
        v_new = np.float32(leak + (1.0 - alpha_v) * np.float64(i_new))
        i[j] = i_new
        v[j] = v_new
        if v_new >= threshold:
            out_spikes[count] = j
            count += 1
    return count


@njit(cache=True, nogil=True)
def backward_kernel(lam, mu, i_next, v_next, bracket, w, presyn_mask,
                    alpha_i, alpha_v, tau_s, threshold, eps, variant,
                    grad, emitted):
    """Step the adjoints from t+1 to t in place and accumulate gradients.

    ``i_next``/``v_next`` are the recorded forward values at t+1, ``bracket``
    the downstream error per neuron for t+1, ``presyn_mask`` the upstream
    raster at t. Writes the upstream error values into ``emitted`` (zero
    where the presynaptic neuron did not spike) and returns the number of
    singularity guards hit.
    """
    n_post, n_pre = w.shape
    guards = 0
    for j in range(n_post):
        mu1 = np.float64(mu[j])
        lam1 = np.float64(lam[j])
        jump = 0.0
        if v_next[j] >= threshold:
            denom = np.float64(i_next[j]) - np.float64(v_next[j])
            if abs(denom) < eps:
                guards += 1
            else:
                jump = (mu1 + np.float64(bracket[j])) / denom
        if variant == 0:
            mu0 = alpha_v * mu1 + jump
            lam0 = alpha_i * lam1 + (1.0 - alpha_i) * mu1
        elif variant == 1:
            mu0 = alpha_v * mu1 + jump
            lam0 = alpha_i * mu1 + (1.0 - alpha_i) * lam1
        else:
            mu0 = alpha_v * (mu1 + jump)
            lam0 = alpha_i * lam1 + (1.0 - alpha_i) * (mu1 + jump)
        mu[j] = np.float32(mu0)
        lam[j] = np.float32(lam0)
    for k in range(n_pre):
        if presyn_mask[k]:
            acc = 0.0
            for j in range(n_post):
                lj = np.float64(lam[j])
                grad[j, k] = np.float32(np.float64(grad[j, k]) - tau_s * lj)
                acc += np.float64(w[j, k]) * (np.float64(mu[j]) - lj)
            emitted[k] = np.float32(acc)
        else:
            emitted[k] = np.float32(0.0)
    return guards


@njit(cache=True, nogil=True)
def simulate_forward(weights, rasters, i_traces, v_traces,
                     alpha_i, alpha_v, threshold):
    """Run all layers forward for the full trial.

    ``rasters[0]`` is the input raster; ``rasters[l + 1]``, ``i_traces[l]``
    and ``v_traces[l]`` are filled for layer l. Row 0 of every trace is the
    zero initial state.
    """
    n_layers = len(weights)
    n_steps = rasters[0].shape[0] - 1
    for t in range(n_steps):
        for l in range(n_layers):
            pre = rasters[l][t]
            presyn = np.flatnonzero(pre)
            n = weights[l].shape[0]
            i = i_traces[l][t].copy()
            v = v_traces[l][t].copy()
            spikes = np.empty(n, dtype=np.int64)
            count = forward_kernel(i, v, weights[l], presyn,
                                   alpha_i, alpha_v, threshold, spikes)
            i_traces[l][t + 1] = i
            v_traces[l][t + 1] = v
            for s in range(count):
                rasters[l + 1][t + 1, spikes[s]] = True


@njit(cache=True, nogil=True)
def simulate_backward(weights, rasters, i_traces, v_traces, brackets,
                      lam_traces, mu_traces, grads,
                      alpha_i, alpha_v, tau_s, threshold, eps, variant):
    """Run all layers backward from step T-1 to 0.

    ``brackets[l]`` is indexed by step; the output layer's entry must hold
    the loss errors, the others are filled here. Returns the guard count.
    """
    n_layers = len(weights)
    n_steps = rasters[0].shape[0] - 1
    guards = 0
    for t in range(n_steps - 1, -1, -1):
        for l in range(n_layers - 1, -1, -1):
            lam = lam_traces[l][t + 1].copy()
            mu = mu_traces[l][t + 1].copy()
            emitted = np.empty(weights[l].shape[1], dtype=np.float32)
            guards += backward_kernel(
                lam, mu, i_traces[l][t + 1], v_traces[l][t + 1],
                brackets[l][t + 1], weights[l], rasters[l][t],
                alpha_i, alpha_v, tau_s, threshold, eps, variant,
                grads[l], emitted)
            lam_traces[l][t] = lam
            mu_traces[l][t] = mu
            if l > 0:
                brackets[l - 1][t] = emitted
    return guards


# --------------------------------------------------------------------------
# Per-layer object API
# --------------------------------------------------------------------------

class LayerState:
    """Forward state of one layer plus its recorded trajectory.

    Traces hold ``T + 1`` rows: row 0 is the initial condition and row t the
    state after step t.
    """

    def __init__(self, n_neurons, n_steps):
        self.n_neurons = int(n_neurons)
        self.n_steps = int(n_steps)
        self.reset()

    def reset(self):
        self.t = 0
        self.i = np.zeros(self.n_neurons, dtype=np.float32)
        self.v = np.zeros(self.n_neurons, dtype=np.float32)
        shape = (self.n_steps + 1, self.n_neurons)
        self.i_trace = np.zeros(shape, dtype=np.float32)
        self.v_trace = np.zeros(shape, dtype=np.float32)
        self.spike_raster = np.zeros(shape, dtype=bool)


class AdjointState:
    """Adjoint variables, gradient accumulator and adjoint trajectories."""

    def __init__(self, n_neurons, n_inputs, n_steps):
        self.n_neurons = int(n_neurons)
        self.n_inputs = int(n_inputs)
        self.n_steps = int(n_steps)
        self.grad = np.zeros((self.n_neurons, self.n_inputs), dtype=np.float32)
        self.reset()

    def reset(self, clear_grad=False):
        self.t = self.n_steps
        self.lam = np.zeros(self.n_neurons, dtype=np.float32)
        self.mu = np.zeros(self.n_neurons, dtype=np.float32)
        shape = (self.n_steps + 1, self.n_neurons)
        self.lam_trace = np.zeros(shape, dtype=np.float32)
        self.mu_trace = np.zeros(shape, dtype=np.float32)
        self.guards = 0
        if clear_grad:
            self.grad[:] = 0.0


def reset_state(state, adj=None, clear_grad=True):
    """Zero state and adjoints, clear traces. Weights are never touched."""
    state.reset()
    if adj is not None:
        adj.reset(clear_grad=clear_grad)
    return state, adj


def _check_weights(weights):
    w = np.asarray(weights)
    if w.dtype != np.float32 or w.ndim != 2 or not w.flags.c_contiguous:
        raise ConfigurationError("weights must be a C-contiguous 2-D float32 array")
    return w


def forward_step(state, params, weights, presyn_spikes):
    """Advance ``state`` from step t to t+1 and record the new row.

    Returns the state and the sorted array of neuron indices that spiked at
    t+1.
    """
    w = _check_weights(weights)
    presyn = np.unique(np.asarray(presyn_spikes, dtype=np.int64))
    if presyn.size and (presyn[0] < 0 or presyn[-1] >= w.shape[1]):
        raise ProtocolError(
            f"presynaptic spike index out of range [0, {w.shape[1]}): {presyn}")
    if state.t >= state.n_steps:
        raise ProtocolError("forward_step beyond the recorded trial length")
    out = np.empty(state.n_neurons, dtype=np.int64)
    count = forward_kernel(state.i, state.v, w, presyn, params.alpha_i,
                           params.alpha_v, params.threshold, out)
    state.t += 1
    state.i_trace[state.t] = state.i
    state.v_trace[state.t] = state.v
    emitted = out[:count].copy()
    state.spike_raster[state.t, emitted] = True
    return state, emitted


def backward_step(adj, recorded, params, weights, downstream_bracket,
                  presyn_raster):
    """Step ``adj`` from t+1 to t using the recorded forward trajectory.

    ``presyn_raster`` is the upstream layer's raster row at step t. Returns
    ``(adj, emitted)`` where ``emitted`` has the upstream error value for
    every presynaptic neuron (zero where it did not spike at t).
    """
    w = _check_weights(weights)
    if adj.t <= 0:
        raise ProtocolError("backward_step below step 0")
    t1 = adj.t
    bracket = np.asarray(downstream_bracket, dtype=np.float32)
    mask = np.asarray(presyn_raster, dtype=bool)
    emitted = np.empty(w.shape[1], dtype=np.float32)
    adj.guards += backward_kernel(
        adj.lam, adj.mu, recorded.i_trace[t1], recorded.v_trace[t1], bracket,
        w, mask, params.alpha_i, params.alpha_v, params.tau_s,
        params.threshold, params.singularity_eps, params.variant_code,
        adj.grad, emitted)
    adj.t -= 1
    adj.lam_trace[adj.t] = adj.lam
    adj.mu_trace[adj.t] = adj.mu
    return adj, emitted


def init_weights(n_in, n_out, s_mu, s_sigma, rng):
    """Draw an ``(n_out, n_in)`` float32 matrix from N(s_mu/sqrt(n_in), s_sigma/sqrt(n_in))."""
    if n_in < 1 or n_out < 1:
        raise ConfigurationError(f"layer dimensions must be >= 1, got ({n_in}, {n_out})")
    if s_sigma < 0:
        raise ConfigurationError("s_sigma must be >= 0")
    scale = 1.0 / math.sqrt(n_in)
    w = rng.normal(s_mu * scale, s_sigma * scale, size=(n_out, n_in))
    return np.ascontiguousarray(w, dtype=np.float32)
