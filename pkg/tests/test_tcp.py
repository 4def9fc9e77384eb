import socket
import threading

import numpy as np
import pytest

from rsagg.errors import FramingError
from rsagg.protocol.runner import Availability, RunConfig, run_simulation, run_tcp_local
from rsagg.ring import RingParams
from rsagg.transport.tcp import parse_address, read_envelope, send_envelope
from rsagg.transport.wire import SERVER_ID, Envelope


def config(**kw):
    return RunConfig(4, 3, 3, 16, RingParams.production(n=64), seed=11, **kw)


def test_tcp_matches_simulation_transcript():
    sim = run_simulation(config())
    tcp = run_tcp_local(config(), deadline_s=5.0)
    assert tcp.all_correct
    assert tcp.transcript() == sim.transcript()
    for a, b in zip(sim.rounds, tcp.rounds):
        assert np.array_equal(sim.server.records[a.round].result, tcp.server.records[b.round].result)


def test_tcp_with_dropout_closes_on_deadline():
    avail = Availability(pattern={1: [0, 1, 3]})
    sim = run_simulation(config(availability=avail))
    tcp = run_tcp_local(config(availability=avail), deadline_s=0.5)
    assert [r.contributors for r in tcp.rounds] == [r.contributors for r in sim.rounds]
    assert tcp.all_correct
    assert tcp.transcript() == sim.transcript()


def test_socket_framing_round_trip():
    a, b = socket.socketpair()
    env = Envelope(6, 2, 1, SERVER_ID, b"payload")
    send_envelope(a, env, threading.Lock())
    assert read_envelope(b) == env
    a.sendall(b"\x09" + bytes(13))
    with pytest.raises(FramingError):
        read_envelope(b)
    a.close()
    with pytest.raises(ConnectionError):
        read_envelope(b)
    b.close()


@pytest.mark.parametrize("text,expect", [("127.0.0.1:9000", ("127.0.0.1", 9000)), (":81", ("127.0.0.1", 81))])
def test_parse_address(text, expect):
    assert parse_address(text) == expect


def test_parse_address_rejects():
    with pytest.raises(ValueError):
        parse_address("localhost")
