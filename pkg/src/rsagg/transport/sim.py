"""Deterministic in-process network.

Messages are delivered first-in first-out. When nothing is in flight the
server's phase deadline fires. Every envelope is encoded to bytes and decoded
again on delivery so the simulator exercises the same framing as TCP.

Time is tracked per node. A message sent at time ``t`` arrives at
``t + latency + size / bandwidth``; a node starts work at the later of its
arrival and the end of its previous work, and its outputs leave when that
work is done. With the simulated clock, work is charged by the cost model,
so the timeline is reproducible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from ..timing import Clock
from .wire import BROADCAST, SERVER_ID, Envelope


@dataclass(frozen=True)
class Delivery:
    time_ms: float
    envelope: Envelope
    dest: int


@dataclass
class LinkModel:
    latency_ms: float = 1.0
    bandwidth_bytes_per_ms: float = 12_500.0  # 100 Mbit/s

    def transfer_ms(self, size: int) -> float:
        return self.latency_ms + size / self.bandwidth_bytes_per_ms


def is_dropped(env: Envelope, drop_pattern: Mapping[int, int] | None) -> bool:
    """True when the sender was dropped at or before the envelope's round."""
    if not drop_pattern or env.sender == SERVER_ID:
        return False
    start = drop_pattern.get(env.sender)
    return start is not None and env.round >= start


def simulate_network(
    schedule: Sequence[Envelope],
    drop_pattern: Mapping[int, int] | None = None,
    *,
    link: LinkModel | None = None,
    recipients: Sequence[int] = (),
) -> list[Delivery]:
    """Deliver a fixed send schedule; returns the delivery trace.

    ``drop_pattern`` maps a client id to the first round from which nothing
    it sends is delivered. Broadcasts fan out to ``recipients``.
    """
    link = link or LinkModel()
    trace = []
    clock = 0.0
    for env in schedule:
        if is_dropped(env, drop_pattern):
            continue
        wire = env.encode()
        clock += link.transfer_ms(len(wire))
        got = Envelope.decode(wire)
        if env.sender != SERVER_ID:
            trace.append(Delivery(clock, got, SERVER_ID))
        elif env.receiver == BROADCAST:
            trace.extend(Delivery(clock, got, r) for r in recipients)
        else:
            trace.append(Delivery(clock, got, env.receiver))
    return trace


class _Server(Protocol):
    time_ms: float
    done: bool

    def handle(self, env: Envelope) -> list[Envelope]: ...

    def on_deadline(self) -> list[Envelope]: ...

    def after_step(self, time_ms: float) -> None: ...


class _Client(Protocol):
    client_id: int

    def start(self) -> list[Envelope]: ...

    def handle(self, env: Envelope) -> list[Envelope]: ...


@dataclass
class SimNetwork:
    server: _Server
    clients: Sequence[_Client]
    clock: Clock
    link: LinkModel = field(default_factory=LinkModel)
    drop_pattern: Mapping[int, int] | None = None
    record_trace: bool = False
    max_steps: int = 10_000_000
    trace: list[Delivery] = field(default_factory=list)
    wire_log: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        self._queue: deque = deque()
        self._busy: dict[int, float] = {c.client_id: 0.0 for c in self.clients}
        self._busy[SERVER_ID] = 0.0
        self._by_id = {c.client_id: c for c in self.clients}
        self._wall0 = self.clock.now_ms()

    def _now(self, node: int) -> float:
        if self.clock.simulated:
            return self._busy[node]
        return self.clock.now_ms() - self._wall0

    def _send(self, envs: list[Envelope], at: float, origin: int) -> None:
        # routing follows the emitting node: relays keep the original sender id
        for env in envs:
            if origin != SERVER_ID and is_dropped(env, self.drop_pattern):
                continue
            wire = env.encode()
            arrive = at + self.link.transfer_ms(len(wire))
            if origin != SERVER_ID:
                self._queue.append((arrive, wire, SERVER_ID))
            elif env.receiver == BROADCAST:
                for c in self.clients:
                    self._queue.append((arrive, wire, c.client_id))
            else:
                self._queue.append((arrive, wire, env.receiver))

    def _process(self, node: int, arrive: float, fn: Callable[[], list[Envelope]]) -> None:
        if self.clock.simulated:
            start = max(self._busy[node], arrive)
            with self.clock.timer() as el:
                if node == SERVER_ID:
                    self.server.time_ms = start
                out = fn()
            self._busy[node] = start + el.ms
            if node == SERVER_ID:
                self.server.after_step(self._busy[node])
            self._send(out, self._busy[node], node)
        else:
            if node == SERVER_ID:
                self.server.time_ms = self._now(node)
            out = fn()
            if node == SERVER_ID:
                self.server.after_step(self._now(node))
            self._send(out, self._now(node), node)

    def run(self) -> None:
        for c in self.clients:
            self._process(c.client_id, 0.0, c.start)
        steps = 0
        while not self.server.done:
            while self._queue:
                steps += 1
                if steps > self.max_steps:
                    raise RuntimeError("simulation did not terminate")
                arrive, wire, dest = self._queue.popleft()
                env = Envelope.decode(wire)
                if self.record_trace:
                    self.trace.append(Delivery(arrive, env, dest))
                    self.wire_log.append(wire)
                if dest == SERVER_ID:
                    self._process(SERVER_ID, arrive, lambda e=env: self.server.handle(e))
                else:
                    client = self._by_id.get(dest)
                    if client is not None:
                        self._process(dest, arrive, lambda e=env, c=client: c.handle(e))
            if self.server.done:
                break
            # quiet network: the current phase times out
            self._process(SERVER_ID, self._busy[SERVER_ID], self.server.on_deadline)
            steps += 1
            if steps > self.max_steps:
                raise RuntimeError("simulation did not terminate")
        # drain what the final phase emitted
        while self._queue:
            arrive, wire, dest = self._queue.popleft()
            env = Envelope.decode(wire)
            if self.record_trace:
                self.trace.append(Delivery(arrive, env, dest))
                self.wire_log.append(wire)
            client = self._by_id.get(dest)
            if client is not None:
                self._process(dest, arrive, lambda e=env, c=client: c.handle(e))
