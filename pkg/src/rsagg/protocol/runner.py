"""End-to-end runs over the simulated network, with correctness checks and CSV output."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ParameterError
from ..ring import RingParams
from ..timing import Clock
from ..transport.sim import LinkModel, SimNetwork
from .nodes import AsaServerNode, ClientNode, InputFn, ServerConfig, ServerNode

log = logging.getLogger(__name__)

MODES = ("rsa", "asa")


@dataclass
class Availability:
    """Which clients answer in each round.

    Priority: an explicit ``pattern`` (round -> online ids), then ``drop_from``
    (client -> first round it is gone for good), then i.i.d. dropout with
    probability ``rate`` drawn from ``(seed, round)``. Key setup and joins
    always see every client online.
    """

    rate: float = 0.0
    seed: int = 0
    pattern: Mapping[int, Sequence[int]] | None = None
    drop_from: Mapping[int, int] = field(default_factory=dict)
    decrypt_pattern: Mapping[int, Sequence[int]] | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1], got {self.rate}")

    def online_set(self, t: int, ids: Sequence[int]) -> frozenset[int]:
        if self.pattern is not None and t in self.pattern:
            base = set(self.pattern[t])
        elif self.rate > 0:
            rng = np.random.default_rng([self.seed, 0x6472, t])
            draws = rng.random(len(ids))
            base = {c for c, u in zip(sorted(ids), draws) if u >= self.rate}
        else:
            base = set(ids)
        return frozenset(c for c in base if not (c in self.drop_from and t >= self.drop_from[c]))

    def online_fn(self, client_id: int, ids: Sequence[int]) -> Callable[[int, str], bool]:
        def online(t: int, phase: str) -> bool:
            if phase in ("setup", "join"):
                return True
            if phase == "decrypt" and self.decrypt_pattern is not None and t in self.decrypt_pattern:
                return client_id in self.decrypt_pattern[t]
            return client_id in self.online_set(t, ids)

        return online


def default_input_bound(params: RingParams, n_total: int, cap: int = 1000) -> int:
    """Largest per-entry magnitude that keeps the aggregate below p/2 (at most ``cap``)."""
    b = (params.p // 2 - 1) // max(1, n_total)
    if b < 1:
        raise ParameterError(f"p={params.p} leaves no room for {n_total} clients")
    return min(cap, b)


def seeded_inputs(seed: int, dim: int, bound: int) -> InputFn:
    """Inputs that depend only on ``(seed, client, round)``, uniform in [-bound, bound]."""

    def fn(client_id: int, t: int, _context: bytes) -> np.ndarray:
        rng = np.random.default_rng([seed, 0x696E, client_id, t])
        return rng.integers(-bound, bound + 1, size=dim, dtype=np.int64)

    return fn


@dataclass
class RunConfig:
    n_clients: int
    threshold: int
    rounds: int
    dim: int
    params: RingParams
    seed: int = 0
    dropout: float = 0.0
    mode: str = "rsa"
    clock: str = "simulated"
    latency_ms: float = 1.0
    bandwidth_bytes_per_ms: float = 12_500.0
    input_bound: int | None = None
    availability: Availability | None = None
    joins: dict[int, int] = field(default_factory=dict)  # before_round -> new client id
    join_points: dict[int, int] = field(default_factory=dict)  # new client id -> requested x
    input_fn: InputFn | None = None
    record_trace: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if not 1 <= self.threshold <= self.n_clients:
            raise ParameterError(f"need 1 <= k <= N, got k={self.threshold}, N={self.n_clients}")
        if self.rounds < 1 or self.dim < 1:
            raise ParameterError("rounds and dim must be positive")
        if self.mode == "asa" and self.joins:
            raise ParameterError("new-user addition is only defined for the share-once protocol")
        if any(t < 1 for t in self.joins):
            raise ParameterError("a join must be scheduled before a round >= 1")

    def all_ids(self) -> list[int]:
        return list(range(self.n_clients)) + sorted(self.joins.values())


@dataclass
class RoundSummary:
    round: int
    ok: bool
    reason: str
    contributors: tuple[int, ...]
    selected: tuple[int, ...]
    correct: bool | None
    messages: int
    bytes_up: int
    bytes_down: int
    round_ms: float
    encrypt_ms: float
    decrypt_ms: float
    noise: int | None
    noise_bound: int | None


CSV_FIELDS = (
    "round",
    "status",
    "contributors",
    "selected",
    "correct",
    "messages",
    "bytes_up",
    "bytes_down",
    "round_ms",
    "t_encrypt_ms",
    "t_decrypt_ms",
    "noise",
    "noise_bound",
)


@dataclass
class RunResult:
    config: RunConfig
    server: ServerNode | AsaServerNode
    clients: list[ClientNode]
    rounds: list[RoundSummary]
    setup_messages: int
    expected: dict[int, np.ndarray]
    network: SimNetwork | None = None

    @property
    def aborted(self) -> int:
        return sum(not r.ok for r in self.rounds)

    @property
    def wrong(self) -> int:
        return sum(r.ok and r.correct is False for r in self.rounds)

    @property
    def all_correct(self) -> bool:
        return self.wrong == 0 and self.server.setup_error is None

    def transcript(self) -> bytes:
        return b"".join(len(x).to_bytes(4, "little") + x for x in self.server.transcript)

    def mean_round_ms(self, include_setup: bool = False) -> float:
        total = sum(r.round_ms for r in self.rounds)
        if include_setup and self.server.round_start:
            total = max(self.server.round_end.values())
        return total / max(1, len(self.rounds))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rounds:
            w.writerow(
                [
                    r.round,
                    "ok" if r.ok else "aborted",
                    " ".join(map(str, r.contributors)),
                    " ".join(map(str, r.selected)),
                    "" if r.correct is None else int(r.correct),
                    r.messages,
                    r.bytes_up,
                    r.bytes_down,
                    f"{r.round_ms:.3f}",
                    f"{r.encrypt_ms:.3f}",
                    f"{r.decrypt_ms:.3f}",
                    "" if r.noise is None else r.noise,
                    "" if r.noise_bound is None else r.noise_bound,
                ]
            )
        return buf.getvalue()


def _node_seeds(cfg: RunConfig) -> list[np.random.SeedSequence]:
    # index 0 is the server, then clients in all_ids() order
    return np.random.SeedSequence([cfg.seed, 0x7273]).spawn(len(cfg.all_ids()) + 1)


def default_input_fn(cfg: RunConfig) -> InputFn:
    bound = cfg.input_bound or default_input_bound(cfg.params, len(cfg.all_ids()))
    return cfg.input_fn or seeded_inputs(cfg.seed, cfg.dim, bound)


def build_server(cfg: RunConfig, *, on_round_complete=None, clock: Clock | None = None):
    clock = clock or Clock(cfg.clock, cfg.params.n)
    scfg = ServerConfig(cfg.n_clients, cfg.threshold, cfg.rounds, joins=dict(cfg.joins))
    server_cls = ServerNode if cfg.mode == "rsa" else AsaServerNode
    rng = np.random.default_rng(_node_seeds(cfg)[0])
    return server_cls(cfg.params, scfg, rng, on_round_complete=on_round_complete, clock=clock)


def build_client(
    cfg: RunConfig, client_id: int, *, on_result=None, clock: Clock | None = None, always_online: bool = False
) -> ClientNode:
    """Client ``client_id`` with the same generator it gets in a full simulated run."""
    clock = clock or Clock(cfg.clock, cfg.params.n)
    ids = cfg.all_ids()
    if client_id not in ids:
        raise ParameterError(f"client id {client_id} is not part of this run (ids {ids})")
    seq = _node_seeds(cfg)[1 + ids.index(client_id)]
    avail = cfg.availability or Availability(rate=cfg.dropout, seed=cfg.seed)
    return ClientNode(
        client_id,
        cfg.params,
        np.random.default_rng(seq),
        default_input_fn(cfg),
        online=(lambda _t, _phase: True) if always_online else avail.online_fn(client_id, ids),
        is_new=client_id in set(cfg.joins.values()),
        requested_point=cfg.join_points.get(client_id),
        on_result=on_result,
        clock=clock,
    )


def build_nodes(cfg: RunConfig, *, on_round_complete=None, on_result=None, clock: Clock | None = None):
    """Server and clients for one run, each with its own seeded generator."""
    clock = clock or Clock(cfg.clock, cfg.params.n)
    server = build_server(cfg, on_round_complete=on_round_complete, clock=clock)
    clients = [build_client(cfg, cid, on_result=on_result, clock=clock) for cid in cfg.all_ids()]
    return server, clients, default_input_fn(cfg)


def summarize(cfg: RunConfig, server, clients, input_fn) -> RunResult:
    rounds, expected = [], {}
    for t in sorted(server.records):
        rec = server.records[t]
        if rec.uploads and cfg.input_fn is None:
            # seeded inputs ignore the context, so the oracle can replay them
            exp = np.zeros(cfg.dim, dtype=np.int64)
            for c in rec.contributors:
                exp += np.asarray(input_fn(c, t, b""), dtype=np.int64)
            expected[t] = exp
        correct = None
        if rec.ok and t in expected:
            correct = bool(np.array_equal(rec.result, expected[t]))
        sel = rec.selection.selected if rec.selection else ()
        rounds.append(
            RoundSummary(
                round=t,
                ok=rec.ok,
                reason=rec.aborted or "",
                contributors=rec.contributors,
                selected=tuple(sel),
                correct=correct,
                messages=server.message_count("round", t),
                bytes_up=server.bytes_up[t],
                bytes_down=server.bytes_down[t],
                round_ms=server.round_ms(t) or 0.0,
                encrypt_ms=sum(c.metrics[t].encrypt_ms for c in clients if t in c.metrics),
                decrypt_ms=sum(c.metrics[t].decrypt_ms for c in clients if t in c.metrics) + server.server_ms[t],
                noise=rec.noise,
                noise_bound=rec.noise_bound,
            )
        )
    return RunResult(cfg, server, clients, rounds, server.message_count("setup", 0), expected)


def run_simulation(cfg: RunConfig, *, on_round_complete=None, on_result=None) -> RunResult:
    clock = Clock(cfg.clock, cfg.params.n)
    server, clients, input_fn = build_nodes(
        cfg, on_round_complete=on_round_complete, on_result=on_result, clock=clock
    )
    net = SimNetwork(
        server,
        clients,
        clock,
        LinkModel(cfg.latency_ms, cfg.bandwidth_bytes_per_ms),
        record_trace=cfg.record_trace,
    )
    net.run()
    result = summarize(cfg, server, clients, input_fn)
    result.network = net
    return result


def run_asa_baseline(
    n_clients: int,
    k: int,
    rounds: int,
    params: RingParams,
    rng: np.random.Generator,
    *,
    dim: int = 16,
    dropout: float = 0.0,
    **kwargs,
) -> RunResult:
    """The per-round key-generation baseline on seeded inputs."""
    seed = int(rng.integers(0, 2**63 - 1))
    cfg = RunConfig(n_clients, k, rounds, dim, params, seed=seed, dropout=dropout, mode="asa", **kwargs)
    return run_simulation(cfg)


def run_tcp_local(cfg: RunConfig, *, deadline_s: float = 5.0, on_round_complete=None) -> RunResult:
    """Same run as :func:`run_simulation`, over loopback TCP with one thread per client."""
    import threading

    from ..transport.tcp import TcpServer, run_client

    clock = Clock("wall", cfg.params.n)
    server, clients, input_fn = build_nodes(cfg, on_round_complete=on_round_complete, clock=clock)
    srv = TcpServer(server, "127.0.0.1", 0, deadline_s=deadline_s)
    host, port = srv.address
    errors: list[BaseException] = []

    def client_main(node):
        try:
            run_client(node, host, port)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=client_main, args=(c,), daemon=True) for c in clients]
    for th in threads:
        th.start()
    srv.run()
    for th in threads:
        th.join(timeout=deadline_s + 5)
    if errors:
        raise errors[0]
    return summarize(cfg, server, clients, input_fn)
