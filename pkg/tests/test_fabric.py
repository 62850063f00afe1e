import io

import numpy as np
import pytest

from eventprop.core import LayerParams, init_weights
from eventprop.exceptions import ConfigurationError, ProtocolError
from eventprop.fabric import (
    BACKWARD, DONE, ERROR, FORWARD, IDLE, SPIKE, START, TURNAROUND, Fabric,
    Packet, PhaseClock, build_topology,
)
from eventprop.loss import LossConfig
from eventprop.optim import AdamState
from eventprop.reference import ReferenceEngine

DIMS = (5, 12, 3)


def make_weights(seed=0, dims=DIMS):
    rng = np.random.default_rng(seed)
    scales = [(3.2, 3.2), (5.2, 2.8)]
    return [init_weights(a, b, *s, rng) for (a, b), s in zip(zip(dims[:-1], dims[1:]), scales)]


def make_fabric(batch_size=4, **kw):
    return Fabric(DIMS, batch_size, LayerParams(), LossConfig(), **kw)


class TestTopology:
    def test_pe_count_for_full_net(self):
        topo = build_topology((5, 120, 3), 22)
        assert topo.n_pes == 89
        assert len(set(topo.all_pes())) == 89

    def test_every_pe_reachable_from_control(self):
        topo = build_topology((5, 120, 60, 3), 5)
        assert topo.reachable_from_control() == set(topo.all_pes())

    def test_routes_within_replica(self):
        topo = build_topology(DIMS, 2)
        inp, l1, l2, loss = topo.replicas[1]
        assert topo.routes[inp] == [0, l1]
        assert topo.routes[l1] == [0, l2]
        assert topo.routes[l2] == [0, loss, l1]
        assert topo.routes[loss] == [0, l2]

    @pytest.mark.parametrize("dims,b", [((5,), 1), ((5, 0, 3), 1), ((5, 3), 0)])
    def test_rejects_bad_layout(self, dims, b):
        with pytest.raises(ConfigurationError):
            build_topology(dims, b)


class TestPhaseClock:
    def test_schedule(self):
        clock = PhaseClock(3)
        seen = [(clock.advance().phase, clock.systicks) for _ in range(clock.n_total_systicks)]
        assert seen == [(FORWARD, 0), (FORWARD, 1), (FORWARD, 2), (FORWARD, 3),
                        (TURNAROUND, 3), (BACKWARD, 2), (BACKWARD, 1), (BACKWARD, 0)]


class TestDelivery:
    def test_mailbox_is_sorted(self):
        with make_fabric(1) as fab:
            inp, l1, l2, loss = fab.topology.replicas[0]
            packets = [Packet(ERROR, loss, l2, np.float32(0.5), 2),
                       Packet(ERROR, loss, l2, np.float32(-1.0), 0),
                       Packet(SPIKE, l1, l2, 7), Packet(SPIKE, l1, l2, 3)]
            fab.step_delivery(packets, IDLE)
            keys = [p.sort_key() for p in fab.pes[l2].mailbox]
            assert keys == sorted(keys)
            assert [p.payload for p in fab.pes[l2].mailbox][:2] == [3, 7]

    def test_unroutable_packet(self):
        with make_fabric(2) as fab:
            a = fab.topology.replicas[0][1]
            b = fab.topology.replicas[1][2]
            with pytest.raises(ProtocolError, match="unroutable"):
                fab.step_delivery([Packet(SPIKE, a, b, 0)], FORWARD)

    def test_errors_rejected_in_forward_phase(self):
        with make_fabric(1) as fab:
            _, _, l2, loss = fab.topology.replicas[0]
            with pytest.raises(ProtocolError):
                fab.step_delivery([Packet(ERROR, loss, l2, np.float32(1), 0)], FORWARD)

    def test_spikes_rejected_in_backward_phase(self):
        with make_fabric(1) as fab:
            _, l1, l2, _ = fab.topology.replicas[0]
            with pytest.raises(ProtocolError):
                fab.step_delivery([Packet(SPIKE, l1, l2, 0)], BACKWARD)

    def test_trace_line_format(self):
        assert Packet(SPIKE, 1, 2, 4).trace_line(7) == "7 spike 1 2 4"
        assert Packet(ERROR, 3, 2, np.float32(0.5), 1).trace_line(9) == "9 error 3 2 1:0.5"
        assert Packet(START, 0, 2).trace_line(0) == "0 start 0 2 -"


class TestBarrier:
    def test_tick_before_start(self):
        with make_fabric(1) as fab:
            pe = fab.pes[fab.topology.replicas[0][1]]
            with pytest.raises(ProtocolError, match="before its start"):
                pe.tick(PhaseClock(28).advance())
            assert pe.blocked_ticks == 1

    def test_exactly_one_start(self):
        with make_fabric(1) as fab:
            pe = fab.pes[fab.topology.replicas[0][1]]
            pe.mailbox = [Packet(START, 0, pe.pe_id)] * 2
            with pytest.raises(ProtocolError):
                pe.receive_start()

    def test_gather_requires_done(self):
        with make_fabric(2) as fab:
            with pytest.raises(ProtocolError, match="did not signal done"):
                fab.gather_gradients()

    def test_budget_too_small(self, small_data):
        X, y = small_data
        with make_fabric(1, n_total_systicks=57) as fab:
            fab.scatter_weights(make_weights())
            with pytest.raises(ProtocolError, match="budget"):
                fab.run_batch(X[:1], y[:1])


class TestExecution:
    def test_scatter_gives_identical_replicas(self):
        with make_fabric(5) as fab:
            fab.scatter_weights(make_weights())
            assert len(set(fab.replica_checksums())) == 1

    def test_scatter_rejects_wrong_shape(self):
        with make_fabric(1) as fab:
            with pytest.raises(ConfigurationError):
                fab.scatter_weights(make_weights(dims=(5, 11, 3)))

    @pytest.mark.parametrize("batch_size", [1, 3, 8])
    def test_ticks_per_sample(self, small_data, batch_size):
        X, y = small_data
        with make_fabric(batch_size) as fab:
            fab.scatter_weights(make_weights())
            fab.run_batch(X[:batch_size], y[:batch_size])
            assert fab.ticks_last_sample == 2 * 28 + 2

    def test_matches_reference_per_sample(self, small_data):
        X, y = small_data
        w = make_weights(3)
        ref = ReferenceEngine(LayerParams(), LossConfig())
        with make_fabric(6) as fab:
            fab.scatter_weights(w)
            results, grad_sets = fab.run_batch(X[:6], y[:6])
        for b, r in enumerate(results):
            expected = ref.run_sample(w, X[b], int(y[b]))
            assert r.loss == expected.loss and r.prediction == expected.prediction
            for g, e in zip(grad_sets[b], expected.grads):
                np.testing.assert_array_equal(g, e)
            for pe, v in zip(r.layers, expected.v_traces):
                np.testing.assert_array_equal(pe.state.v_trace, v)

    def test_partial_batch_uses_leading_replicas(self, small_data):
        X, y = small_data
        with make_fabric(4) as fab:
            fab.scatter_weights(make_weights())
            results, _ = fab.run_batch(X[:2], y[:2])
            assert len(results) == 2
            with pytest.raises(ConfigurationError):
                fab.run_batch(X[:5], y[:5])

    def test_worker_count_does_not_change_results(self, small_data):
        X, y = small_data
        outs = []
        for workers in (1, 3):
            w = make_weights(5)
            adam = AdamState()
            with make_fabric(4, n_workers=workers) as fab:
                fab.scatter_weights(w)
                for start in range(0, 12, 4):
                    _, _, adam, w = fab.train_batch(X[start:start + 4], y[start:start + 4], adam)
            outs.append(w)
        for a, b in zip(*outs):
            np.testing.assert_array_equal(a, b)

    def test_event_conservation_in_trace(self, small_data):
        X, y = small_data
        buf = io.StringIO()
        with make_fabric(3, trace=buf) as fab:
            fab.scatter_weights(make_weights(1))
            results, _ = fab.run_batch(X[:3], y[:3])
        kinds = [line.split()[1] for line in buf.getvalue().splitlines()]
        n_in = int(np.sum((X[:3] >= 0) & (X[:3] < 28)))
        layer_spikes = sum(int(pe.state.spike_raster.sum()) for r in results for pe in r.layers)
        hidden_before_T = sum(int(r.layers[0].state.spike_raster[:28].sum()) for r in results)
        first_spikes = sum(3 - r.n_silent for r in results)
        assert kinds.count(SPIKE) == n_in + layer_spikes
        assert kinds.count(ERROR) == first_spikes + hidden_before_T
        assert kinds.count(START) == kinds.count(DONE) == 3 * 4
