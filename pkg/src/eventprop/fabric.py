"""
Deterministic message-passing emulation of the many-core training fabric.

Every replica is a pipeline of logical processing elements (PEs)::

    input -> layer 1 -> ... -> layer L -> loss

and a single control PE starts each sample, gathers gradients, runs the
optimiser and scatters the new weights. PEs talk only through packets that
are delivered with a latency of exactly one tick. A sample takes
``2 * T + 2`` ticks:

* forward ticks ``f = 0 .. T``: layer PEs compute state f from spikes the
  upstream PE sent at tick f-1 and send their own spikes of step f;
* one turnaround tick: last spikes are received but not integrated, the
  loss PE computes the loss, layer PEs zero their adjoints;
* backward ticks for steps ``s = T-1 .. 0``: layer PEs consume error
  packets for step s+1, step their adjoints to s and send error packets for
  the upstream neurons that spiked at s.

Mailboxes are sorted by ``(source_pe, key, payload)`` before a PE reads
them, so results do not depend on how PEs are scheduled onto workers.
"""
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import loss as ttfs
from .core import AdjointState, LayerState, backward_step, forward_step
from .exceptions import ConfigurationError, ProtocolError
from .optim import adam_step, combine

logger = logging.getLogger(__name__)

SPIKE, ERROR, START, DONE = "spike", "error", "start", "done"
FORWARD, TURNAROUND, BACKWARD, IDLE = "forward", "turnaround", "backward", "idle"


class Packet(NamedTuple):
    kind: str
    source_pe: int
    target_pe: int
    # neuron index for spikes, float32 value for errors, None for control
    payload: Any = None
    # index of the receiving neuron for error packets (the routing key)
    key: int = -1

    def sort_key(self):
        p = self.payload if self.payload is not None else 0
        return (self.source_pe, self.key, p)

    def trace_line(self, tick):
        if self.kind == ERROR:
            payload = f"{self.key}:{float(self.payload)!r}"
        elif self.kind == SPIKE:
            payload = str(self.payload)
        else:
            payload = "-"
        return f"{tick} {self.kind} {self.source_pe} {self.target_pe} {payload}"


@dataclass
class Topology:
    net_dims: tuple
    replicas: list
    control_pe: int = 0
    routes: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return len(self.net_dims) - 1

    @property
    def n_pes(self):
        return 1 + sum(len(r) for r in self.replicas)

    def all_pes(self):
        return [self.control_pe] + [pe for r in self.replicas for pe in r]

    def reachable_from_control(self):
        seen, stack = {self.control_pe}, [self.control_pe]
        while stack:
            for nxt in self.routes.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen


def build_topology(net_dims, batch_size):
    """Lay out ``batch_size`` isomorphic pipelines plus one control PE."""
    net_dims = tuple(int(d) for d in net_dims)
    if len(net_dims) < 2 or min(net_dims) < 1:
        raise ConfigurationError(f"net_dims needs >= 2 positive entries, got {net_dims}")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n_layers = len(net_dims) - 1
    width = n_layers + 2
    replicas = [list(range(1 + b * width, 1 + (b + 1) * width)) for b in range(batch_size)]
    routes = {0: [pe for r in replicas for pe in r]}
    for r in replicas:
        for pos, pe in enumerate(r):
            out = [0]
            if pos + 1 < width:
                out.append(r[pos + 1])
            # errors flow loss -> layer L -> ... -> layer 1; none to the input
            if pos >= 2:
                out.append(r[pos - 1])
            routes[pe] = out
    return Topology(net_dims, replicas, 0, routes)


@dataclass
class PhaseClock:
    n_steps: int
    systicks: int = -1
    total_systicks: int = -1
    phase: str = IDLE

    @property
    def n_total_systicks(self):
        return 2 * self.n_steps + 2

    def advance(self):
        self.total_systicks += 1
        T = self.n_steps
        tick = self.total_systicks
        if tick <= T:
            self.phase, self.systicks = FORWARD, tick
        elif tick == T + 1:
            self.phase, self.systicks = TURNAROUND, T
        else:
            self.phase, self.systicks = BACKWARD, 2 * T + 1 - tick
        return self


class ProcessingElement:
    def __init__(self, pe_id, replica, control_pe=0):
        self.pe_id = pe_id
        self.replica = replica
        self.control_pe = control_pe
        self.mailbox = []
        self.outbox = []
        self.started = False
        self.done = False
        self.starts_seen = 0
        self.blocked_ticks = 0

    def send(self, kind, target, payload=None, key=-1):
        self.outbox.append(Packet(kind, self.pe_id, target, payload, key))

    def receive_start(self):
        starts = [p for p in self.mailbox if p.kind == START]
        if len(starts) != 1:
            raise ProtocolError(f"PE {self.pe_id} expected one start packet, got {len(starts)}")
        self.mailbox = [p for p in self.mailbox if p.kind != START]
        self.starts_seen += 1
        self.started = True
        self.done = False
        self.reset_and_sync()

    def reset_and_sync(self):
        pass

    def tick(self, clock):
        if not self.started:
            self.blocked_ticks += 1
            raise ProtocolError(f"PE {self.pe_id} ticked before its start signal")
        inbox, self.mailbox = self.mailbox, []
        for p in inbox:
            if p.kind == ERROR and clock.phase == FORWARD:
                raise ProtocolError(f"error packet {p} during forward phase")
            if p.kind == SPIKE and clock.phase == BACKWARD:
                raise ProtocolError(f"spike packet {p} during backward phase")
        self.process(clock, inbox)
        if clock.total_systicks == clock.n_total_systicks - 1:
            self.finish()

    def finish(self):
        self.started = False
        self.done = True
        self.send(DONE, self.control_pe)

    def process(self, clock, inbox):
        raise NotImplementedError


class InputPE(ProcessingElement):
    """Injects the sample's input spikes at their encoded steps."""

    def __init__(self, pe_id, replica, target, n_inputs):
        super().__init__(pe_id, replica)
        self.target = target
        self.n_inputs = n_inputs
        self.steps = None

    def load_sample(self, steps):
        steps = np.asarray(steps, dtype=np.int64)
        if steps.shape != (self.n_inputs,):
            raise ConfigurationError(f"sample has {steps.shape} inputs, expected {self.n_inputs}")
        self.steps = steps

    def process(self, clock, inbox):
        if clock.phase != FORWARD or self.steps is None:
            return
        for k in np.flatnonzero(self.steps == clock.systicks):
            self.send(SPIKE, self.target, int(k))


class LayerPE(ProcessingElement):
    """One LIF layer holding a dense local weight matrix."""

    def __init__(self, pe_id, replica, layer, n_in, n_out, n_steps, params,
                 downstream, upstream):
        super().__init__(pe_id, replica)
        self.layer = layer
        self.params = params
        self.downstream = downstream
        self.upstream = upstream
        self.n_steps = n_steps
        self.weights = np.zeros((n_out, n_in), dtype=np.float32)
        self.state = LayerState(n_out, n_steps)
        self.adj = AdjointState(n_out, n_in, n_steps)
        self.presyn_raster = np.zeros((n_steps + 1, n_in), dtype=bool)

    def reset_and_sync(self):
        self.state.reset()
        self.adj.reset(clear_grad=True)
        self.presyn_raster[:] = False

    def _receive_spikes(self, inbox, step):
        idx = sorted(p.payload for p in inbox if p.kind == SPIKE)
        if idx and (idx[0] < 0 or idx[-1] >= self.weights.shape[1]):
            raise ProtocolError(f"PE {self.pe_id}: spike index out of range: {idx}")
        if step >= 0:
            self.presyn_raster[step, idx] = True
        return idx

    def process(self, clock, inbox):
        if clock.phase == FORWARD:
            presyn = self._receive_spikes(inbox, clock.systicks - 1)
            if clock.systicks == 0:
                return
            _, emitted = forward_step(self.state, self.params, self.weights, presyn)
            for j in emitted:
                self.send(SPIKE, self.downstream, int(j))
        elif clock.phase == TURNAROUND:
            # receive last spikes but do not process
            self._receive_spikes(inbox, clock.systicks)
            self.adj.reset(clear_grad=False)
        elif clock.phase == BACKWARD:
            s = clock.systicks
            bracket = np.zeros(self.state.n_neurons, dtype=np.float32)
            for p in inbox:
                if p.kind == ERROR:
                    bracket[p.key] = p.payload
            _, emitted = backward_step(self.adj, self.state, self.params, self.weights,
                                       bracket, self.presyn_raster[s])
            if self.upstream is not None:
                for k in np.flatnonzero(self.presyn_raster[s]):
                    self.send(ERROR, self.upstream, np.float32(emitted[k]), int(k))


class LossPE(ProcessingElement):
    """Records first output spikes, computes the loss, sends error events."""

    def __init__(self, pe_id, replica, upstream, loss_cfg):
        super().__init__(pe_id, replica)
        self.upstream = upstream
        self.loss_cfg = loss_cfg
        self.label = None
        self.record = None
        self.signals = None
        self.loss = None
        self.prediction = None

    def load_label(self, label):
        self.label = int(label)

    def reset_and_sync(self):
        self.record = ttfs.FirstSpikeRecord(self.loss_cfg.n_classes, self.label)
        self.signals = None
        self.loss = None
        self.prediction = None

    def _receive(self, inbox, step):
        for p in inbox:
            if p.kind == SPIKE:
                ttfs.record_spike(self.record, p.payload, step)

    def _send_errors(self, step):
        for k, pairs in enumerate(self.signals):
            for s, value in pairs:
                if s == step:
                    self.send(ERROR, self.upstream, np.float32(value), k)

    def process(self, clock, inbox):
        if clock.phase == FORWARD:
            if clock.systicks >= 1:
                self._receive(inbox, clock.systicks - 1)
        elif clock.phase == TURNAROUND:
            self._receive(inbox, clock.systicks)
            self.loss = ttfs.compute_loss(self.record, self.loss_cfg)
            self.prediction = ttfs.predict(self.record)
            self.signals = ttfs.compute_error_signals(self.record, self.loss_cfg)
            self._send_errors(self.n_steps)
        elif clock.phase == BACKWARD:
            self._send_errors(clock.systicks)

    @property
    def n_steps(self):
        return self.loss_cfg.n_steps


@dataclass
class ReplicaResult:
    loss: float
    prediction: int
    grads: list
    guards: int
    n_silent: int
    layers: list


def weights_checksum(weights):
    crc = 0
    for w in weights:
        crc = zlib.crc32(np.ascontiguousarray(w).tobytes(), crc)
    return crc


class Fabric:
    """The full set of PEs plus a control node and a tick scheduler.

    Parameters
    ----------
    net_dims : sequence of int
        Layer widths including the input, e.g. ``(5, 120, 3)``.
    batch_size : int
        Number of replicas, one sample each per batch.
    params : LayerParams
    loss_cfg : LossConfig
    n_workers : int
        Worker threads the PEs are scheduled onto; 1 runs them round-robin
        in the calling thread.
    n_total_systicks : int, optional
        Per-sample tick budget; defaults to ``2 * T + 2``.
    trace : file-like, optional
        Receives one ``tick kind source target payload`` line per packet.
    """

    def __init__(self, net_dims, batch_size, params, loss_cfg, n_workers=1,
                 n_total_systicks=None, trace=None):
        self.topology = build_topology(net_dims, batch_size)
        self.params = params
        self.loss_cfg = loss_cfg
        self.n_steps = loss_cfg.n_steps
        self.n_total_systicks = (2 * self.n_steps + 2 if n_total_systicks is None
                                 else int(n_total_systicks))
        self.n_workers = max(1, int(n_workers))
        self.trace = trace
        self.global_tick = 0
        self.ticks_last_sample = 0
        self.pes = {}
        dims = self.topology.net_dims
        L = self.topology.n_layers
        for b, chain in enumerate(self.topology.replicas):
            self.pes[chain[0]] = InputPE(chain[0], b, chain[1], dims[0])
            for l in range(L):
                pe = chain[1 + l]
                self.pes[pe] = LayerPE(
                    pe, b, l, dims[l], dims[l + 1], self.n_steps, params,
                    downstream=chain[2 + l],
                    upstream=chain[l] if l > 0 else None)
            self.pes[chain[-1]] = LossPE(chain[-1], b, chain[-2], loss_cfg)
        self.active = list(range(batch_size))
        self.control_inbox = []
        self._pool = ThreadPoolExecutor(self.n_workers) if self.n_workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- control node -----------------------------------------------------

    def layer_pes(self, replica):
        chain = self.topology.replicas[replica]
        return [self.pes[pe] for pe in chain[1:-1]]

    def scatter_weights(self, weights):
        """Copy ``weights`` into every replica's layer PEs."""
        weights = [np.ascontiguousarray(w, dtype=np.float32) for w in weights]
        for b in range(len(self.topology.replicas)):
            for pe, w in zip(self.layer_pes(b), weights):
                if pe.weights.shape != w.shape:
                    raise ConfigurationError(
                        f"layer {pe.layer}: weight shape {w.shape} != {pe.weights.shape}")
                pe.weights = w.copy()

    def replica_checksums(self):
        return [weights_checksum([pe.weights for pe in self.layer_pes(b)])
                for b in range(len(self.topology.replicas))]

    def _active_pes(self):
        ids = [pe for b in self.active for pe in self.topology.replicas[b]]
        return [self.pes[pe] for pe in sorted(ids)]

    def broadcast_start(self):
        packets = [Packet(START, self.topology.control_pe, pe.pe_id)
                   for pe in self._active_pes()]
        self.step_delivery(packets, phase=IDLE)
        for pe in self._active_pes():
            pe.receive_start()

    def gather_gradients(self):
        """Per-replica gradient lists, replica-ascending. All must be done."""
        done = {p.source_pe for p in self.control_inbox if p.kind == DONE}
        sets = []
        for b in self.active:
            missing = [pe for pe in self.topology.replicas[b] if pe not in done]
            if missing:
                raise ProtocolError(f"replica {b} did not signal done (PEs {missing})")
            sets.append([pe.adj.grad.copy() for pe in self.layer_pes(b)])
        return sets

    # -- delivery and scheduling -------------------------------------------

    def step_delivery(self, packets, phase):
        """Route ``packets`` into target mailboxes in normalized order."""
        routes = self.topology.routes
        by_target = {}
        for p in packets:
            if p.target_pe not in routes.get(p.source_pe, ()):
                raise ProtocolError(f"unroutable packet {p}")
            if p.kind == ERROR and phase == FORWARD:
                raise ProtocolError(f"error packet {p} sent during forward phase")
            if p.kind == SPIKE and phase == BACKWARD:
                raise ProtocolError(f"spike packet {p} sent during backward phase")
            if self.trace is not None:
                self.trace.write(p.trace_line(self.global_tick) + "\n")
            by_target.setdefault(p.target_pe, []).append(p)
        for target, box in by_target.items():
            box.sort(key=Packet.sort_key)
            if target == self.topology.control_pe:
                self.control_inbox.extend(box)
            else:
                self.pes[target].mailbox.extend(box)
                self.pes[target].mailbox.sort(key=Packet.sort_key)

    def _tick_all(self, pes, clock):
        if self._pool is None:
            for pe in pes:
                pe.tick(clock)
            return
        chunks = [pes[w::self.n_workers] for w in range(self.n_workers)]

        def work(chunk):
            for pe in chunk:
                pe.tick(clock)

        for fut in [self._pool.submit(work, c) for c in chunks if c]:
            fut.result()

    def run_sample_ticks(self):
        """Drive all active replicas through one sample."""
        clock = PhaseClock(self.n_steps)
        pes = self._active_pes()
        self.control_inbox = []
        while not all(pe.done for pe in pes):
            if clock.total_systicks + 1 >= self.n_total_systicks:
                raise ProtocolError(
                    f"tick budget of {self.n_total_systicks} exceeded at tick "
                    f"{clock.total_systicks + 1}; needs {clock.n_total_systicks}")
            clock.advance()
            self._tick_all(pes, clock)
            outgoing = [p for pe in pes for p in pe.outbox]
            for pe in pes:
                pe.outbox = []
            self.step_delivery(outgoing, clock.phase)
            self.global_tick += 1
        self.ticks_last_sample = clock.total_systicks + 1
        return self.ticks_last_sample

    def run_batch(self, X, y):
        """Run ``len(X)`` samples in parallel replicas; weights must be loaded."""
        n = len(X)
        if not 1 <= n <= len(self.topology.replicas):
            raise ConfigurationError(
                f"batch of {n} samples needs 1..{len(self.topology.replicas)} replicas")
        self.active = list(range(n))
        for b in self.active:
            chain = self.topology.replicas[b]
            self.pes[chain[0]].load_sample(X[b])
            self.pes[chain[-1]].load_label(y[b])
        self.broadcast_start()
        self.run_sample_ticks()
        grad_sets = self.gather_gradients()
        results = []
        for b, grads in zip(self.active, grad_sets):
            chain = self.topology.replicas[b]
            loss_pe = self.pes[chain[-1]]
            layers = self.layer_pes(b)
            results.append(ReplicaResult(
                loss=loss_pe.loss, prediction=loss_pe.prediction, grads=grads,
                guards=sum(pe.adj.guards for pe in layers),
                n_silent=loss_pe.record.n_silent, layers=layers))
        return results, grad_sets

    def run_sample(self, weights, steps, label):
        """Run a single sample on replica 0 and return its result."""
        self.scatter_weights(weights)
        results, _ = self.run_batch([steps], [label])
        return results[0]

    def train_batch(self, X, y, adam, grad_reduction="sum"):
        """Forward/backward on all replicas, then gather, Adam and scatter."""
        results, grad_sets = self.run_batch(X, y)
        grads = combine(grad_sets, grad_reduction)
        current = [pe.weights for pe in self.layer_pes(0)]
        adam, new_weights = adam_step(adam, grads, current)
        self.scatter_weights(new_weights)
        return results, grads, adam, new_weights
