import json

import numpy as np
import pytest

from meshfl.errors import RoutingFault, SchedulingError, TelemetryError
from meshfl.routing import BaselineForwarder
from meshfl.simnet import (
    BackgroundFlowSpec,
    EventEngine,
    FlowKey,
    Link,
    Network,
    NetworkConfig,
    Packet,
    PacketKind,
    pop_telemetry,
    poisson_arrivals,
    stamp_telemetry,
)
from meshfl.topology import build_topology


def _packet(payload=1500, kind=PacketKind.DATA, pid=1):
    return Packet(pid, FlowKey("src", "dst"), payload, ttl=8, kind=kind)


def _network(topo, **cfg):
    engine = EventEngine()
    baseline = BaselineForwarder(topo)
    net = Network(engine, topo, NetworkConfig(**cfg), forwarder=baseline, background_forwarder=baseline)
    net.start()
    return engine, net


def test_event_at_now_runs_before_later_events():
    engine = EventEngine()
    seen = []
    engine.post_event(5.0, seen.append, "later")
    engine.post_event(0.0, seen.append, "now")
    engine.run()
    assert seen == ["now", "later"]


def test_equal_timestamps_run_in_posting_order():
    engine = EventEngine()
    seen = []
    for label in "abc":
        engine.post_event(1.0, seen.append, label)
    engine.run()
    assert seen == ["a", "b", "c"]
    assert engine.now == 1.0


def test_posting_in_the_past_is_rejected():
    engine = EventEngine()
    engine.post_event(10.0, lambda: None)
    engine.run()
    with pytest.raises(SchedulingError):
        engine.post_event(9.0, lambda: None)


def test_run_until_leaves_future_events_queued():
    engine = EventEngine()
    seen = []
    engine.post_event(1.0, seen.append, 1)
    engine.post_event(3.0, seen.append, 3)
    engine.run(until=2.0)
    assert seen == [1] and engine.now == 2.0 and engine.pending == 1


def test_model_transfer_on_idle_link():
    link = Link("A", "B", 40e6)
    assert link.transmit(_packet(5_800_000), 0.0) == pytest.approx(1160.0)


def test_zero_byte_control_stub_pays_processing_delay_only():
    link = Link("A", "B", 40e6, proc_delay_ms=0.5)
    assert link.transmit(_packet(0, PacketKind.CONTROL), 0.0) == 0.5


def test_second_simultaneous_packet_waits_for_the_first():
    link = Link("A", "B", 8e6)
    first = link.transmit(_packet(1000), 0.0)
    second = link.transmit(_packet(1000), 0.0)
    assert first == pytest.approx(1.0)
    assert second == pytest.approx(2 * first)


def test_jitter_preserves_fifo_order():
    link = Link("A", "B", 1e6, proc_delay_ms=2.0, jitter_ms=5.0, rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    now, deliveries = 0.0, []
    for pid in range(500):
        now += float(rng.exponential(3.0))
        deliveries.append(link.transmit(_packet(200, pid=pid), now))
    assert deliveries == sorted(deliveries)


def test_bounded_queue_drops_the_tail():
    link = Link("A", "B", 8e6, queue_limit=1)
    assert link.transmit(_packet(1000), 0.0) is not None
    assert link.transmit(_packet(1000), 0.0) is None
    assert link.dropped == 1
    assert link.transmit(_packet(1000), 1.0) is not None


def test_unbounded_link_forgets_finished_transmissions():
    link = Link("A", "B", 40e6)
    for i in range(100_000):
        link.transmit(_packet(1500, pid=i), float(i))
    assert len(link._in_service) <= 1
    assert link.sent == 100_000


def test_data_packets_need_payload():
    with pytest.raises(ValueError):
        _packet(0)
    with pytest.raises(ValueError):
        FlowKey("a", "a")


def test_stamp_and_pop():
    pkt = stamp_telemetry(_packet(), "R1", 10.0)
    assert (pkt.telemetry.sender, pkt.telemetry.send_timestamp) == ("R1", 10.0)
    delay, same = pop_telemetry(pkt, 12.5)
    assert delay == 2.5 and same is pkt and pkt.telemetry is None


def test_pop_at_stamp_time_is_zero():
    pkt = stamp_telemetry(_packet(), "R1", 10.0)
    assert pop_telemetry(pkt, 10.0)[0] == 0.0


def test_double_stamp_and_missing_header_fail():
    pkt = stamp_telemetry(_packet(), "R1", 10.0)
    with pytest.raises(TelemetryError):
        stamp_telemetry(pkt, "R2", 11.0)
    pop_telemetry(pkt, 11.0)
    with pytest.raises(TelemetryError):
        pop_telemetry(pkt, 12.0)


def test_zero_rate_background_sends_nothing(line_topo):
    engine, net = _network(line_topo)
    net.spawn_background(BackgroundFlowSpec(FlowKey("src", "dst"), 0.0), seed=1, until_ms=10_000)
    engine.run()
    assert net.stats.injected == 0
    assert len(poisson_arrivals(0.0, 10_000, 1)) == 0


def test_poisson_arrivals_are_reproducible_and_match_injection(line_topo):
    first = poisson_arrivals(100.0, 10_000, (5, 10_000))
    assert np.array_equal(first, poisson_arrivals(100.0, 10_000, (5, 10_000)))

    engine, net = _network(line_topo)
    net.spawn_background(BackgroundFlowSpec(FlowKey("src", "dst"), 100.0, 200), (5, 10_000), until_ms=10_000)
    engine.run()
    assert net.stats.injected == len(first)
    assert net.stats.delivered == len(first)


def test_poisson_count_over_100_seconds():
    counts = len(poisson_arrivals(100.0, 100_000, 42))
    assert abs(counts - 10_000) < 3 * np.sqrt(10_000)


def test_background_on_a_fixed_route(diamond_topo):
    engine, net = _network(diamond_topo)
    spec = BackgroundFlowSpec(FlowKey("src", "dst"), 50.0, 500, route=("S", "B", "T"))
    net.spawn_background(spec, 9, until_ms=2000)
    engine.run()
    assert net.links[("S", "B")].sent == net.stats.injected > 0
    assert net.links[("S", "A")].sent == 0


def test_telemetry_matches_engine_delays_over_ten_thousand_packets(mesh10_topo):
    engine, net = _network(mesh10_topo, mtu_bytes=1500)
    checked = []
    net.hop_observers.append(lambda pkt, router, upstream, delay: checked.append(delay == pkt.hop_delays[-1]))
    rng = np.random.default_rng(11)
    t = 0.0
    endpoints = ["W1", "W2", "W3"]
    for i in range(10_000):
        t += float(rng.exponential(0.5))
        src = endpoints[i % 3]
        src, dst = (src, "SERVER") if i % 2 else ("SERVER", src)
        engine.post_event(t, net.send_message, src, dst, int(rng.integers(1, 1500)))
    engine.run()
    assert net.stats.delivered == 10_000
    assert len(checked) == net.stats.hops and all(checked)
    assert net.stats.telemetry_mismatches == 0


def test_message_is_delivered_when_its_last_fragment_arrives(line_topo):
    engine, net = _network(line_topo)
    done = []
    message = net.send_message("src", "dst", 4000, on_delivered=lambda m, now: done.append(now))
    engine.run()
    assert message.fragments == 3
    assert done == [message.delivered_at]
    assert message.delay_ms == message.delivered_at
    # fragments pipeline across S->A->T; the short tail waits behind the second full one on A->T
    tx = Link("x", "y", 40e6).transmission_ms
    assert message.delivered_at == pytest.approx(3 * tx(1500) + tx(1000))


def test_dropped_fragments_are_retransmitted(line_topo):
    engine, net = _network(line_topo, queue_limit=1, retransmit_timeout_ms=50.0)
    done = []
    net.send_message("src", "dst", 4500, on_delivered=lambda m, now: done.append(now))
    engine.run()
    assert len(done) == 1
    assert net.stats.dropped_queue > 0
    assert net.stats.retransmissions == net.stats.dropped_queue
    assert net.stats.injected == net.stats.delivered + net.stats.dropped + net.live


class _BrokenAtA(BaselineForwarder):
    def next_hop(self, router, pkt, now):
        if router == "A":
            raise RoutingFault("no next hop at A")
        return super().next_hop(router, pkt, now)


def test_routing_fault_fails_the_message(line_topo):
    engine = EventEngine()
    net = Network(engine, line_topo, NetworkConfig(), forwarder=_BrokenAtA(line_topo))
    net.start()
    failed, done = [], []
    message = net.send_message(
        "src", "dst", 4000, on_delivered=lambda m, now: done.append(now), on_failed=lambda m, now: failed.append(now)
    )
    engine.run()
    assert done == [] and message.delivered_at is None
    assert failed == [message.failed_at]
    assert net.stats.failed_messages == 1
    assert net.stats.dropped_fault == 3
    assert net.stats.retransmissions == 0
    assert net.stats.injected == net.stats.delivered + net.stats.dropped + net.live


def test_negative_return_equals_end_to_end_delay(mesh10_topo):
    engine, net = _network(mesh10_topo)
    for i in range(200):
        engine.post_event(i * 0.3, net.send_message, "W1", "SERVER", 1500)
    engine.run()
    stats = net.stats.flows[FlowKey("W1", "SERVER")]
    assert stats.packets == 200
    assert stats.neg_return_sum == pytest.approx(stats.delay_sum, rel=1e-12)


def test_ttl_expiry_is_counted_and_conserved():
    topo = build_topology(
        {
            "routers": ["R1", "R2", "R3", "R4", "R5"],
            "links": [[f"R{i}", f"R{i + 1}", 10, 0.1] for i in range(1, 5)],
            "hosts": {"a": "R1", "b": "R5"},
        }
    )
    engine, net = _network(topo, ttl_hops=2, retransmit_timeout_ms=1e9)
    net.send_message("a", "b", 100)
    engine.run(until=1000)
    assert net.stats.dropped_ttl == 1
    assert net.stats.injected == net.stats.delivered + net.stats.dropped + net.live


def test_packet_trace_is_written_as_json_lines(line_topo, tmp_path):
    path = tmp_path / "trace.jsonl"
    engine, net = _network(line_topo, trace_path=path)
    net.send_message("src", "dst", 100)
    engine.run()
    net.close()
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["hop"] for r in records] == ["S", "A", "T"]
    assert [r["packet"] for r in records] == [1, 1, 1]


def test_identical_runs_give_identical_event_traces(mesh10_topo):
    def run():
        engine = EventEngine(trace=True)
        baseline = BaselineForwarder(mesh10_topo)
        net = Network(engine, mesh10_topo, NetworkConfig(), seed=3, forwarder=baseline, background_forwarder=baseline)
        net.spawn_background(BackgroundFlowSpec(FlowKey("BG_R8", "BG_R5"), 200.0, 1500), (3, 10_000), until_ms=500)
        for i in range(50):
            engine.post_event(i * 2.0, net.send_message, "W2", "SERVER", 3000)
        engine.run()
        return engine.trace

    assert run() == run()
