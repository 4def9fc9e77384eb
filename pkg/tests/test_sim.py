import numpy as np

from rsagg.transport.sim import LinkModel, simulate_network
from rsagg.transport.wire import BROADCAST, SERVER_ID, Envelope


def schedule():
    out = []
    for t in range(5):
        for c in range(4):
            out.append(Envelope(6, t, c, SERVER_ID, bytes([c, t])))
        out.append(Envelope(10, t, SERVER_ID, BROADCAST, b"r"))
    return out


def test_no_drops_delivers_in_order():
    sched = schedule()
    trace = simulate_network(sched, recipients=range(4))
    client_msgs = [d.envelope for d in trace if d.dest == SERVER_ID]
    assert client_msgs == [e for e in sched if e.sender != SERVER_ID]
    times = [d.time_ms for d in trace]
    assert times == sorted(times)
    assert sum(d.envelope.sender == SERVER_ID for d in trace) == 5 * 4


def test_dropped_client_goes_silent_from_round():
    trace = simulate_network(schedule(), {2: 3}, recipients=range(4))
    from_two = [d.envelope.round for d in trace if d.envelope.sender == 2]
    assert from_two == [0, 1, 2]


def test_same_input_same_trace():
    assert simulate_network(schedule(), {1: 2}) == simulate_network(schedule(), {1: 2})


def test_link_model_transfer_time():
    link = LinkModel(latency_ms=2.0, bandwidth_bytes_per_ms=100.0)
    assert link.transfer_ms(300) == 5.0
    trace = simulate_network([Envelope(1, 0, 0, SERVER_ID, bytes(86))], link=link)
    assert np.isclose(trace[0].time_ms, 2.0 + 1.0)
