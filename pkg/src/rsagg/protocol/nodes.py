"""Sans-IO client and server state machines.

Nodes consume :class:`Envelope` objects and return the envelopes they want
sent; a driver (simulator or TCP runner) moves bytes. The server buffers
everything it receives and acts only when the driver closes the current
phase with :meth:`ServerNode.on_deadline`. Buffered messages are then
processed in sender order, so the server's output does not depend on
arrival order.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..bfv import PublicKey, aggregate_noise_bound, keygen_public, keygen_secret
from ..errors import FramingError, ProtocolError, RoundAborted, SecureChannelError
from ..ring import RingElement, RingParams, sample
from ..shamir import EvalPoint, KeyShare, Share
from ..timing import Clock
from ..transport.secure import TransportKey, secure_unwrap, secure_wrap
from ..transport.wire import BROADCAST, SERVER_ID, Envelope, MsgType
from . import core
from .messages import (
    AggBroadcast,
    BlobPayload,
    CpkBroadcast,
    CtUpload,
    DecShare,
    HelperRequest,
    NewUserRequest,
    Register,
    RingPayload,
    RosterEntry,
    RoundResult,
    RoundStatus,
    SelectCoeffs,
    SetupParams,
    decode_share_plain,
    encode_share_plain,
)

log = logging.getLogger(__name__)

OnlineFn = Callable[[int, str], bool]
InputFn = Callable[[int, int, bytes], np.ndarray]


def _always(_t: int, _phase: str) -> bool:
    return True


def _aad(env_type: int, rnd: int, sender: int, receiver: int) -> bytes:
    return bytes([env_type]) + rnd.to_bytes(4, "little") + sender.to_bytes(2, "little") + receiver.to_bytes(2, "little")


# ---------------------------------------------------------------- client


@dataclass
class ClientMetrics:
    encrypt_ms: float = 0.0
    decrypt_ms: float = 0.0
    setup_ms: float = 0.0


class ClientNode:
    """One client. ``online(t, phase)`` decides whether it answers in that phase.

    Phases asked about: ``setup``, ``upload``, ``decrypt`` and ``join``.
    Offline clients still receive messages but send nothing.
    """

    def __init__(
        self,
        client_id: int,
        params: RingParams,
        rng: np.random.Generator,
        input_fn: InputFn,
        *,
        online: OnlineFn = _always,
        is_new: bool = False,
        requested_point: int | None = None,
        on_result: Callable[[int, int, RoundResult], None] | None = None,
        clock: Clock | None = None,
    ):
        self.client_id = client_id
        self.params = params
        self.rng = rng
        self.input_fn = input_fn
        self.online = online
        self.is_new = is_new
        self.requested_point = requested_point
        self.on_result = on_result
        self.clock = clock or Clock("simulated", params.n)
        self.transport = TransportKey.generate(rng)

        self.roster: dict[int, RosterEntry] = {}
        self.point: EvalPoint | None = None
        self.n_clients = 0
        self.threshold = 0
        self.p1: RingElement | None = None
        self._setup: core.ClientSetup | None = None
        self._incoming: dict[int, Share] = {}
        self.key_share: KeyShare | None = None
        self.cpk: PublicKey | None = None
        self.per_round = False
        self._asa_secret: dict[int, RingElement] = {}
        self._asa_members: dict[int, tuple[int, ...]] = {}
        self._agg_c1: dict[int, tuple[RingElement, ...]] = {}
        self._helpers: tuple[int, ...] = ()
        self._aux: dict[int, RingElement] = {}
        self.context = b""
        self.results: dict[int, RoundResult] = {}
        self.metrics: dict[int, ClientMetrics] = defaultdict(ClientMetrics)
        self.finished = False
        self.errors: list[str] = []

    # -- helpers

    def _env(self, mtype: MsgType, rnd: int, payload: bytes, receiver: int = SERVER_ID) -> Envelope:
        return Envelope(int(mtype), rnd, self.client_id, receiver, payload)

    def _wrap_for(self, peer: int, pubkey: bytes, mtype: MsgType, rnd: int, plain: bytes) -> Envelope:
        aad = _aad(int(mtype), rnd, self.client_id, peer)
        blob = secure_wrap(plain, self.transport, pubkey, self.rng, aad=aad)
        return self._env(mtype, rnd, BlobPayload(blob.to_bytes()).encode(), peer)

    def _unwrap_from(self, env: Envelope) -> bytes:
        entry = self.roster.get(env.sender)
        if entry is None:
            raise ProtocolError(f"blob from unknown client {env.sender}")
        blob = BlobPayload.decode(env.payload).blob
        aad = _aad(env.msg_type, env.round, env.sender, env.receiver)
        return secure_unwrap(blob, self.transport, entry.pubkey, aad=aad)

    @property
    def ready(self) -> bool:
        return self.key_share is not None and self.cpk is not None

    # -- entry points

    def start(self) -> list[Envelope]:
        out = [self._env(MsgType.REGISTER, 0, Register(self.transport.public, self.is_new).encode())]
        if self.is_new:
            x = self.client_id + 1 if self.requested_point is None else self.requested_point
            out.append(self._env(MsgType.NEWUSER_REQ, 0, NewUserRequest(x).encode()))
        return out

    def handle(self, env: Envelope) -> list[Envelope]:
        try:
            return self._dispatch(env)
        except (FramingError, SecureChannelError, ProtocolError) as exc:
            msg = f"client {self.client_id}: dropped {env.type_name()} round {env.round}: {exc}"
            log.warning(msg)
            self.errors.append(msg)
            return []

    def _dispatch(self, env: Envelope) -> list[Envelope]:
        t = env.msg_type
        if t == MsgType.SETUP_PARAMS:
            return self._on_setup_params(env)
        if t == MsgType.SECRET_SHARE:
            return self._on_secret_share(env)
        if t == MsgType.CPK_BCAST:
            return self._on_cpk(env)
        if t == MsgType.AGG_BCAST:
            return self._on_agg(env)
        if t == MsgType.SELECT_COEFFS:
            return self._on_select(env)
        if t == MsgType.ROUND_RESULT:
            return self._on_result(env)
        if t == MsgType.NEWUSER_REQ:
            return self._on_helper_request(env)
        if t == MsgType.AUX_SHARE:
            return self._on_aux(env)
        raise ProtocolError(f"unexpected message type {env.msg_type}")

    # -- setup

    def _on_setup_params(self, env: Envelope) -> list[Envelope]:
        sp = SetupParams.decode(env.payload)
        if sp.params != self.params:
            raise ProtocolError("server parameters differ from local configuration")
        self.n_clients, self.threshold, self.p1 = sp.n_clients, sp.threshold, sp.p1
        self.roster = {e.client_id: e for e in sp.roster}
        self.per_round = sp.per_round
        me = self.roster.get(self.client_id)
        if me is None:
            raise ProtocolError("not on the roster")
        if me.pubkey != self.transport.public:
            raise ProtocolError("roster carries a different transport key for this client")
        self.point = EvalPoint(me.x, self.client_id)
        if sp.per_round:
            return self._asa_keygen(env.round)
        if sp.late:
            self._helpers = sp.helpers
            return []
        if not self.online(0, "setup"):
            return []
        with self.clock.timer() as el:
            points = [EvalPoint(e.x, e.client_id) for e in sorted(sp.roster, key=lambda e: e.client_id)]
            self._setup = core.client_setup(
                self.params, sp.n_clients, sp.threshold, sp.p1, points, self.client_id, self.rng
            )
        self.metrics[0].setup_ms += el.ms
        self._incoming = {self.client_id: self._setup.shares[self.client_id]}
        out = [self._env(MsgType.PK_SHARE, 0, RingPayload(self._setup.pk_share).encode())]
        for cid in sorted(self.roster):
            if cid == self.client_id:
                continue
            sh = self._setup.shares[cid]
            plain = encode_share_plain(sh.value, sh.point.x)
            out.append(self._wrap_for(cid, self.roster[cid].pubkey, MsgType.SECRET_SHARE, 0, plain))
        return out

    def _on_secret_share(self, env: Envelope) -> list[Envelope]:
        if self.point is None:
            raise ProtocolError("share before setup parameters")
        x, value = decode_share_plain(self._unwrap_from(env), self.params)
        if x != self.point.x:
            raise ProtocolError(f"share evaluated at {x}, expected {self.point.x}")
        self._incoming[env.sender] = Share(self.point, value)
        if len(self._incoming) == self.n_clients:
            self.key_share = core.aggregate_key_share(
                [self._incoming[c] for c in sorted(self._incoming)], self.point, self.n_clients
            )
            self._incoming = {}
        return []

    def _on_cpk(self, env: Envelope) -> list[Envelope]:
        cb = CpkBroadcast.decode(env.payload, self.params)
        if self.p1 is not None and cb.p1 != self.p1:
            raise ProtocolError("collective key uses an unexpected common polynomial")
        if self.point is None:
            return []  # a joining user hears the original broadcast; not for it yet
        self.cpk = PublicKey(cb.p0, cb.p1)
        if self.per_round:
            self._asa_members[env.round] = cb.members
            return self._upload(env.round)
        if self.is_new and self.key_share is None:
            self._assemble_new_share()
        return self._upload(env.round)

    # -- rounds

    def _upload(self, t: int) -> list[Envelope]:
        if self.cpk is None or (not self.per_round and self.key_share is None):
            return []
        if not self.online(t, "upload"):
            return []
        g = np.asarray(self.input_fn(self.client_id, t, self.context), dtype=np.int64)
        with self.clock.timer() as el:
            cts = core.client_encrypt_input(g, self.cpk, self.params, self.rng)
        self.metrics[t].encrypt_ms += el.ms
        return [self._env(MsgType.CT_UPLOAD, t, CtUpload(int(g.size), tuple(cts)).encode())]

    def _on_agg(self, env: Envelope) -> list[Envelope]:
        agg = AggBroadcast.decode(env.payload, self.params)
        self._agg_c1[env.round] = agg.c1
        if self.per_round:
            t = env.round
            s = self._asa_secret.get(t)
            if s is None or self.client_id not in self._asa_members.get(t, ()):
                return []
            if not self.online(t, "decrypt"):
                return []
            with self.clock.timer() as el:
                hs = core.client_decryption_share(agg.c1, 1, s, self.params, self.rng)
            self.metrics[t].decrypt_ms += el.ms
            return [self._env(MsgType.DEC_SHARE, t, DecShare(tuple(hs)).encode())]
        return []

    def _on_select(self, env: Envelope) -> list[Envelope]:
        t = env.round
        sel = SelectCoeffs.decode(env.payload, self.params.q)
        if self.client_id not in sel.selected:
            raise ProtocolError("selection message for a client that was not selected")
        if self.key_share is None:
            raise ProtocolError("selected without a key share")
        c1 = self._agg_c1.pop(t, None)
        if c1 is None:
            raise ProtocolError("selected before the aggregate arrived")
        if not self.online(t, "decrypt"):
            return []
        with self.clock.timer() as el:
            hs = core.client_decryption_share(c1, sel.coeff, self.key_share.value, self.params, self.rng)
        self.metrics[t].decrypt_ms += el.ms
        return [self._env(MsgType.DEC_SHARE, t, DecShare(tuple(hs)).encode())]

    def _on_result(self, env: Envelope) -> list[Envelope]:
        res = RoundResult.decode(env.payload)
        t = env.round
        self.results[t] = res
        self._agg_c1.pop(t, None)
        self._asa_secret.pop(t, None)
        if res.extra:
            self.context = res.extra
        if self.on_result is not None:
            self.on_result(self.client_id, t, res)
        if res.final:
            self.finished = True
            return []
        if self.per_round:
            return []
        return self._upload(t + 1)

    # -- per-round baseline

    def _asa_keygen(self, t: int) -> list[Envelope]:
        if not self.online(t, "upload"):
            return []
        with self.clock.timer() as el:
            sk = keygen_secret(self.params, self.rng)
            pk = keygen_public(sk, self.p1, self.params, self.rng)
        self.metrics[t].setup_ms += el.ms
        self._asa_secret[t] = sk.s
        return [self._env(MsgType.PK_SHARE, t, RingPayload(pk.p0).encode())]

    # -- new-user addition

    def _on_helper_request(self, env: Envelope) -> list[Envelope]:
        req = HelperRequest.decode(env.payload, self.params.q)
        if self.key_share is None:
            raise ProtocolError("asked to help without a key share")
        if not self.online(env.round, "join"):
            return []
        existing = [e.x for e in self.roster.values()]
        with self.clock.timer() as el:
            aux = core.helper_aux_share(self.key_share.value, req.column, req.x_new, existing_points=existing)
        self.metrics[env.round].setup_ms += el.ms
        self.roster[req.new_id] = RosterEntry(req.new_id, req.x_new, req.pubkey)
        plain = encode_share_plain(aux, req.x_new)
        return [self._wrap_for(req.new_id, req.pubkey, MsgType.AUX_SHARE, env.round, plain)]

    def _on_aux(self, env: Envelope) -> list[Envelope]:
        if self.point is None or env.sender not in self._helpers:
            raise ProtocolError(f"auxiliary share from non-helper {env.sender}")
        x, value = decode_share_plain(self._unwrap_from(env), self.params)
        if x != self.point.x:
            raise ProtocolError("auxiliary share evaluated at the wrong point")
        self._aux[env.sender] = value
        return []

    def _assemble_new_share(self) -> None:
        aux = [self._aux[h] for h in self._helpers if h in self._aux]
        self.key_share = core.newuser_assemble(aux, self.point.x, self.threshold, self.client_id)
        self._aux = {}


# ---------------------------------------------------------------- server


class Phase(enum.Enum):
    REGISTER = "register"
    SETUP = "setup"
    KEYGEN = "keygen"
    AUX = "aux"
    UPLOAD = "upload"
    SHARES = "shares"
    DONE = "done"


# messages that only announce a phase outcome are left out of the counts
UNCOUNTED_RSA = {MsgType.REGISTER, MsgType.CPK_BCAST, MsgType.ROUND_RESULT}
UNCOUNTED_ASA = {MsgType.REGISTER, MsgType.ROUND_RESULT}


@dataclass
class JoinRecord:
    before_round: int
    new_id: int
    x_new: int | None = None
    helpers: tuple[int, ...] = ()
    ok: bool = False
    error: str | None = None


@dataclass
class ServerConfig:
    n_clients: int
    threshold: int
    rounds: int
    client_ids: tuple[int, ...] | None = None
    joins: dict[int, int] = field(default_factory=dict)  # before_round -> new client id

    def ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_clients)) if self.client_ids is None else tuple(self.client_ids)


class _ServerBase:
    uncounted: set = UNCOUNTED_RSA

    def __init__(
        self,
        params: RingParams,
        config: ServerConfig,
        rng: np.random.Generator,
        *,
        on_round_complete: Callable[[core.RoundRecord], bytes] | None = None,
        clock: Clock | None = None,
    ):
        if not 1 <= config.threshold <= config.n_clients:
            raise ProtocolError(f"threshold {config.threshold} out of range for {config.n_clients} clients")
        self.params = params
        self.config = config
        self.rng = rng
        self.on_round_complete = on_round_complete
        self.clock = clock or Clock("simulated", params.n)
        self.phase = Phase.REGISTER
        self.round = 0
        self.inbox: list[Envelope] = []
        self.pubkeys: dict[int, bytes] = {}
        self.points: dict[int, EvalPoint] = {}
        self.roster: list[int] = []
        self.p1: RingElement | None = None
        self.cpk: PublicKey | None = None
        self.records: dict[int, core.RoundRecord] = {}
        self.counts: dict[tuple[str, int], Counter] = defaultdict(Counter)
        self.bytes_up: Counter = Counter()
        self.bytes_down: Counter = Counter()
        self.transcript: list[bytes] = []
        self.setup_error: str | None = None
        self.closed: set[tuple[int, int]] = set()
        self.time_ms = 0.0
        self.round_start: dict[int, float] = {}
        self.round_end: dict[int, float] = {}
        self.server_ms: Counter = Counter()
        self._pending_new: dict[int, tuple[bytes | None, int | None]] = {}
        self._stamps: list[tuple[dict, int]] = []

    # -- bookkeeping

    def _bucket(self, env: Envelope) -> tuple[str, int]:
        return ("round", env.round)

    def _count(self, env: Envelope) -> None:
        if env.msg_type in self.uncounted:
            return
        self.counts[self._bucket(env)][MsgType(env.msg_type).name] += 1

    def message_count(self, bucket: str, rnd: int = 0) -> int:
        return sum(self.counts[(bucket, rnd)].values())

    def _emit(self, out: list[Envelope], env: Envelope, *, count: bool = True) -> None:
        if count:
            self._count(env)
        fanout = len(self.roster) if env.receiver == BROADCAST else 1
        self.bytes_down[env.round] += (len(env.payload) + 14) * fanout
        self.transcript.append(b"O" + env.encode())
        out.append(env)

    def _out(self, mtype: MsgType, rnd: int, payload: bytes, receiver: int = BROADCAST) -> Envelope:
        return Envelope(int(mtype), rnd, SERVER_ID, receiver, payload)

    def _take(self, mtype: MsgType, rnd: int, senders: Iterable[int] | None = None) -> list[Envelope]:
        """Remove matching buffered messages; keep one per sender, sender-sorted."""
        allowed = None if senders is None else set(senders)
        keep, hit = [], {}
        for env in self.inbox:
            if env.msg_type == mtype and env.round == rnd:
                if (allowed is None or env.sender in allowed) and env.sender not in hit:
                    hit[env.sender] = env
                continue
            keep.append(env)
        self.inbox = keep
        self.closed.add((int(mtype), rnd))
        chosen = [hit[s] for s in sorted(hit)]
        for env in chosen:
            self.transcript.append(b"I" + env.encode())
        return chosen

    def _take_pairs(self, mtype: MsgType, rnd: int) -> list[Envelope]:
        """Like :meth:`_take` for relayed messages keyed by (sender, receiver)."""
        keep, hit = [], {}
        for env in self.inbox:
            if env.msg_type == mtype and env.round == rnd:
                hit.setdefault((env.sender, env.receiver), env)
                continue
            keep.append(env)
        self.inbox = keep
        self.closed.add((int(mtype), rnd))
        chosen = [hit[k] for k in sorted(hit)]
        for env in chosen:
            self.transcript.append(b"I" + env.encode())
        return chosen

    def handle(self, env: Envelope) -> list[Envelope]:
        self._count(env)
        self.bytes_up[env.round] += len(env.payload) + 14
        if self.phase == Phase.DONE or (env.msg_type, env.round) in self.closed:
            rec = self.records.get(env.round)
            if rec is not None:
                rec.late_discarded += 1
            return []
        self.inbox.append(env)
        return []

    @property
    def done(self) -> bool:
        return self.phase == Phase.DONE

    def after_step(self, time_ms: float) -> None:
        """Driver hook: the work of the last call finished at ``time_ms``."""
        for table, t in self._stamps:
            table[t] = time_ms
        self._stamps.clear()
        self.time_ms = time_ms

    def round_ms(self, t: int) -> float | None:
        if t in self.round_start and t in self.round_end:
            return self.round_end[t] - self.round_start[t]
        return None

    def _register(self, out: list[Envelope]) -> bool:
        regs = self._take(MsgType.REGISTER, 0)
        originals = []
        for env in regs:
            try:
                reg = Register.decode(env.payload)
            except FramingError as exc:
                log.warning("bad REGISTER from %d: %s", env.sender, exc)
                continue
            if reg.is_new:
                prev = self._pending_new.get(env.sender, (None, None))
                self._pending_new[env.sender] = (reg.pubkey, prev[1])
                continue
            self.pubkeys[env.sender] = reg.pubkey
            originals.append(env.sender)
        expected = self.config.ids()
        if sorted(originals) != sorted(expected):
            missing = sorted(set(expected) - set(originals))
            self._fail_setup(out, f"registration incomplete: missing {missing}")
            return False
        self.roster = sorted(originals)
        self.points = {c: EvalPoint(c + 1, c) for c in self.roster}
        return True

    def _fail_setup(self, out: list[Envelope], reason: str) -> None:
        self.setup_error = reason
        log.error("setup failed: %s", reason)
        res = RoundResult(RoundStatus.ABORTED, True, None, b"", reason)
        self._emit(out, self._out(MsgType.ROUND_RESULT, 0, res.encode()))
        self.phase = Phase.DONE

    def _roster_entries(self) -> tuple[RosterEntry, ...]:
        return tuple(RosterEntry(c, self.points[c].x, self.pubkeys[c]) for c in sorted(self.points))

    def _finish_round(self, out: list[Envelope], rec: core.RoundRecord) -> None:
        t = rec.round
        final = t == self.config.rounds - 1
        extra = b""
        if self.on_round_complete is not None:
            extra = self.on_round_complete(rec) or b""
        if rec.ok:
            res = RoundResult(RoundStatus.OK, final, rec.result, extra)
        else:
            res = RoundResult(RoundStatus.ABORTED, final, None, extra, rec.aborted or "")
        self._emit(out, self._out(MsgType.ROUND_RESULT, t, res.encode()))
        self._stamps.append((self.round_end, t))
        if final:
            self.phase = Phase.DONE
        else:
            self._start_round(out, t + 1)

    def _start_round(self, out: list[Envelope], t: int) -> None:
        raise NotImplementedError

    def _abort(self, rec: core.RoundRecord, reason: str) -> None:
        rec.aborted = reason
        log.info("round %d aborted: %s", rec.round, reason)

    def _decode_uploads(self, rec: core.RoundRecord, envs: list[Envelope]) -> int | None:
        dims = {}
        for env in envs:
            try:
                up = CtUpload.decode(env.payload, self.params)
            except FramingError as exc:
                log.warning("bad upload from %d: %s", env.sender, exc)
                continue
            rec.uploads[env.sender] = list(up.chunks)
            dims[env.sender] = up.dim
        if len(set(dims.values())) > 1:
            self._abort(rec, f"clients disagree on the input dimension: {sorted(set(dims.values()))}")
            return None
        return next(iter(dims.values())) if dims else 0

    def _finalize(self, rec: core.RoundRecord, envs: list[Envelope], dim: int, n_setup: int) -> None:
        for env in envs:
            try:
                rec.shares[env.sender] = list(DecShare.decode(env.payload, self.params).shares)
            except FramingError as exc:
                log.warning("bad decryption share from %d: %s", env.sender, exc)
        c0 = [ct.c0 for ct in rec.aggregate]
        with self.clock.timer() as el:
            try:
                rec.result = core.server_finalize_round(
                    rec.round, c0, rec.shares, rec.selection.selected, dim, self.params
                )
            except RoundAborted as exc:
                self._abort(rec, exc.reason)
        self.server_ms[rec.round] += el.ms
        if rec.result is not None:
            combined = core.combine_shares(c0, rec.shares, rec.selection.selected)
            rec.noise = core.residual_noise(combined, rec.result, self.params)
            k = len(rec.selection.selected)
            rec.noise_bound = (
                aggregate_noise_bound(self.params, n_setup, len(rec.uploads)) + k * self.params.smudging_bound
            )


class ServerNode(_ServerBase):
    """Server for the share-once protocol: one key setup, then T rounds."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.joins: dict[int, JoinRecord] = {}
        self._phase_round = 0
        self._dim: dict[int, int] = {}

    def _bucket(self, env: Envelope) -> tuple[str, int]:
        t = env.msg_type
        if t in (MsgType.PK_SHARE, MsgType.SECRET_SHARE):
            return ("setup", 0)
        if t == MsgType.SETUP_PARAMS:
            return ("join", env.round) if env.receiver in self._pending_new else ("setup", 0)
        if t in (MsgType.NEWUSER_REQ, MsgType.AUX_SHARE):
            return ("join", env.round)
        return ("round", env.round)

    def handle(self, env: Envelope) -> list[Envelope]:
        # joining users may announce themselves at any time; keep them aside
        if env.msg_type == MsgType.NEWUSER_REQ and env.sender not in self.points:
            self._count_join_request(env)
            try:
                req = NewUserRequest.decode(env.payload)
            except FramingError:
                return []
            prev = self._pending_new.get(env.sender, (None, None))
            self._pending_new[env.sender] = (prev[0], req.x_new)
            return []
        if env.msg_type == MsgType.REGISTER:
            try:
                reg = Register.decode(env.payload)
            except FramingError:
                return []
            if reg.is_new:
                self.bytes_up[env.round] += len(env.payload) + 14
                prev = self._pending_new.get(env.sender, (None, None))
                self._pending_new[env.sender] = (reg.pubkey, prev[1])
                return []
        return super().handle(env)

    def _count_join_request(self, env: Envelope) -> None:
        before = next((r for r, cid in self.config.joins.items() if cid == env.sender), env.round)
        self.counts[("join", before)]["NEWUSER_REQ"] += 1
        self.bytes_up[env.round] += len(env.payload) + 14

    def expected(self) -> int | None:
        """How many messages close the current phase early (TCP driver)."""
        n = len(self.roster)
        if self.phase == Phase.REGISTER:
            return len(self.config.ids())
        if self.phase == Phase.SETUP:
            return n + n * (n - 1)
        if self.phase == Phase.AUX:
            return len(self.joins[self._phase_round].helpers)
        if self.phase == Phase.UPLOAD:
            return n
        if self.phase == Phase.SHARES:
            rec = self.records.get(self.round)
            return len(rec.selection.selected) if rec and rec.selection else 0
        return None

    def buffered(self) -> int:
        if self.phase == Phase.REGISTER:
            return sum(1 for e in self.inbox if e.msg_type == MsgType.REGISTER and e.sender not in self._pending_new)
        kinds = {
            Phase.SETUP: (MsgType.PK_SHARE, MsgType.SECRET_SHARE),
            Phase.AUX: (MsgType.AUX_SHARE,),
            Phase.UPLOAD: (MsgType.CT_UPLOAD,),
            Phase.SHARES: (MsgType.DEC_SHARE,),
        }.get(self.phase, ())
        rnd = self._phase_round if self.phase != Phase.SETUP else 0
        return len({(e.msg_type, e.sender, e.receiver) for e in self.inbox if e.msg_type in kinds and e.round == rnd})

    def on_deadline(self) -> list[Envelope]:
        out: list[Envelope] = []
        if self.phase == Phase.REGISTER:
            if self._register(out):
                self.p1 = sample("uniform", self.params, self.rng)
                sp = SetupParams(
                    self.params, len(self.roster), self.config.threshold, self.p1, self._roster_entries()
                )
                payload = sp.encode()
                for c in self.roster:
                    self._emit(out, self._out(MsgType.SETUP_PARAMS, 0, payload, c))
                self.phase = Phase.SETUP
        elif self.phase == Phase.SETUP:
            self._close_setup(out)
        elif self.phase == Phase.AUX:
            self._close_join(out)
        elif self.phase == Phase.UPLOAD:
            self._close_upload(out)
        elif self.phase == Phase.SHARES:
            self._close_shares(out)
        return out

    def _close_setup(self, out: list[Envelope]) -> None:
        pks = {}
        for env in self._take(MsgType.PK_SHARE, 0, self.roster):
            try:
                pks[env.sender] = RingPayload.decode(env.payload, self.params).value
            except FramingError as exc:
                log.warning("bad key share from %d: %s", env.sender, exc)
        relays = [e for e in self._take_pairs(MsgType.SECRET_SHARE, 0) if e.sender in pks and e.receiver in self.points]
        have = {(e.sender, e.receiver) for e in relays}
        need = {(a, b) for a in self.roster for b in self.roster if a != b}
        try:
            with self.clock.timer() as el:
                self.cpk = core.server_setup_aggregate(pks, self.p1, expected=self.roster)
            self.server_ms["setup"] += el.ms
        except ProtocolError as exc:
            self._fail_setup(out, str(exc))
            return
        if need - have:
            self._fail_setup(out, f"setup aborted: {len(need - have)} secret shares missing")
            return
        for env in relays:
            out.append(env)
            self.transcript.append(b"O" + env.encode())
            self.bytes_down[0] += len(env.payload) + 14
        cb = CpkBroadcast(self.cpk.p0, self.cpk.p1)
        self._emit(out, self._out(MsgType.CPK_BCAST, 0, cb.encode()))
        self._start_round(out, 0)

    def _start_round(self, out: list[Envelope], t: int) -> None:
        self.round = t
        self._phase_round = t
        self._stamps.append((self.round_start, t))
        self.records[t] = core.RoundRecord(t)
        new_id = self.config.joins.get(t)
        if new_id is not None and t not in self.joins:
            self._open_join(out, t, new_id)
            if self.phase == Phase.AUX:
                return
        self.phase = Phase.UPLOAD

    def _open_join(self, out: list[Envelope], t: int, new_id: int) -> None:
        rec = JoinRecord(t, new_id)
        self.joins[t] = rec
        pubkey, x_new = self._pending_new.get(new_id, (None, None))
        if pubkey is None or x_new is None:
            rec.error = "joining client has not registered"
            log.warning("join before round %d: %s", t, rec.error)
            return
        k = self.config.threshold
        helpers = tuple(sorted(self.points)[:k])
        existing = [self.points[c].x for c in self.points]
        if x_new % self.params.q == 0 or any((x_new - x) % self.params.q == 0 for x in existing):
            rec.error = f"evaluation point {x_new} collides with an existing client"
            log.warning("join before round %d: %s", t, rec.error)
            return
        if new_id in self.points:
            rec.error = f"client id {new_id} is already on the roster"
            return
        rec.x_new, rec.helpers = x_new, helpers
        self.pubkeys[new_id] = pubkey
        entries = self._roster_entries() + (RosterEntry(new_id, x_new, pubkey),)
        sp = SetupParams(self.params, len(self.roster), k, self.p1, entries, late=True, helpers=helpers)
        self._emit(out, self._out(MsgType.SETUP_PARAMS, t, sp.encode(), new_id))
        columns = core.helper_columns([self.points[h] for h in helpers], k, self.params.q)
        for h in helpers:
            req = HelperRequest(new_id, x_new, pubkey, tuple(columns[h]))
            self._emit(out, self._out(MsgType.NEWUSER_REQ, t, req.encode(self.params.q), h))
        self.phase = Phase.AUX

    def _close_join(self, out: list[Envelope]) -> None:
        t = self._phase_round
        rec = self.joins[t]
        relays = [e for e in self._take_pairs(MsgType.AUX_SHARE, t) if e.receiver == rec.new_id and e.sender in rec.helpers]
        got = {e.sender for e in relays}
        if got != set(rec.helpers):
            rec.error = f"missing auxiliary shares from {sorted(set(rec.helpers) - got)}"
            log.warning("join before round %d failed: %s", t, rec.error)
            self.pubkeys.pop(rec.new_id, None)
        else:
            for env in relays:
                out.append(env)
                self.transcript.append(b"O" + env.encode())
                self.bytes_down[t] += len(env.payload) + 14
            self.points[rec.new_id] = EvalPoint(rec.x_new, rec.new_id)
            self.roster = sorted(self.points)
            rec.ok = True
            cb = CpkBroadcast(self.cpk.p0, self.cpk.p1)
            self._emit(out, self._out(MsgType.CPK_BCAST, t, cb.encode(), rec.new_id))
        self.phase = Phase.UPLOAD

    def _close_upload(self, out: list[Envelope]) -> None:
        t = self.round
        rec = self.records[t]
        dim = self._decode_uploads(rec, self._take(MsgType.CT_UPLOAD, t, self.points))
        if rec.aborted is not None:
            self._finish_round(out, rec)
            return
        if not rec.uploads:
            self._abort(rec, "no uploads")
            self._finish_round(out, rec)
            return
        self._dim[t] = dim
        try:
            with self.clock.timer() as el:
                rec.selection = core.server_select_and_coeffs(
                    t, rec.contributors, self.points, self.config.threshold, self.params.q
                )
                rec.aggregate = core.server_aggregate_ciphertexts(rec.uploads)
            self.server_ms[t] += el.ms
        except RoundAborted as exc:
            self._abort(rec, exc.reason)
            self._finish_round(out, rec)
            return
        except ProtocolError as exc:
            self._abort(rec, str(exc))
            self._finish_round(out, rec)
            return
        agg = AggBroadcast(tuple(ct.c1 for ct in rec.aggregate))
        self._emit(out, self._out(MsgType.AGG_BCAST, t, agg.encode()))
        for a in rec.selection.selected:
            sc = SelectCoeffs(rec.selection.coeffs[a], rec.selection.selected)
            self._emit(out, self._out(MsgType.SELECT_COEFFS, t, sc.encode(self.params.q), a))
        self.phase = Phase.SHARES

    def _close_shares(self, out: list[Envelope]) -> None:
        t = self.round
        rec = self.records[t]
        envs = self._take(MsgType.DEC_SHARE, t, rec.selection.selected)
        self._finalize(rec, envs, self._dim[t], len(self.config.ids()))
        self._finish_round(out, rec)


class AsaServerNode(_ServerBase):
    """Baseline server that reruns key generation among online clients every round.

    Each round: broadcast a fresh common polynomial, collect public-key shares
    (which double as availability), pick the k lowest responders as the
    decryptor set whose keys form that round's collective key, then aggregate
    and decrypt k-of-k with unit coefficients.
    """

    uncounted = UNCOUNTED_ASA

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._members: dict[int, tuple[int, ...]] = {}
        self._dim: dict[int, int] = {}

    def expected(self) -> int | None:
        n = len(self.roster)
        if self.phase == Phase.REGISTER:
            return len(self.config.ids())
        if self.phase in (Phase.KEYGEN, Phase.UPLOAD):
            return n
        if self.phase == Phase.SHARES:
            return len(self._members.get(self.round, ()))
        return None

    def buffered(self) -> int:
        if self.phase == Phase.REGISTER:
            return sum(1 for e in self.inbox if e.msg_type == MsgType.REGISTER)
        kind = {Phase.KEYGEN: MsgType.PK_SHARE, Phase.UPLOAD: MsgType.CT_UPLOAD, Phase.SHARES: MsgType.DEC_SHARE}.get(
            self.phase
        )
        return len({e.sender for e in self.inbox if e.msg_type == kind and e.round == self.round})

    def on_deadline(self) -> list[Envelope]:
        out: list[Envelope] = []
        if self.phase == Phase.REGISTER:
            if self._register(out):
                self._start_round(out, 0)
        elif self.phase == Phase.KEYGEN:
            self._close_keygen(out)
        elif self.phase == Phase.UPLOAD:
            self._close_upload(out)
        elif self.phase == Phase.SHARES:
            self._close_shares(out)
        return out

    def _start_round(self, out: list[Envelope], t: int) -> None:
        self.round = t
        self._stamps.append((self.round_start, t))
        self.records[t] = core.RoundRecord(t)
        self.p1 = sample("uniform", self.params, self.rng)
        sp = SetupParams(
            self.params, len(self.roster), self.config.threshold, self.p1, self._roster_entries(), per_round=True
        )
        self._emit(out, self._out(MsgType.SETUP_PARAMS, t, sp.encode()))
        self.phase = Phase.KEYGEN

    def _close_keygen(self, out: list[Envelope]) -> None:
        t = self.round
        rec = self.records[t]
        pks = {}
        for env in self._take(MsgType.PK_SHARE, t, self.roster):
            try:
                pks[env.sender] = RingPayload.decode(env.payload, self.params).value
            except FramingError as exc:
                log.warning("bad key share from %d: %s", env.sender, exc)
        k = self.config.threshold
        if len(pks) < k:
            self._abort(rec, f"only {len(pks)} of the required {k} clients answered key generation")
            self._finish_round(out, rec)
            return
        members = tuple(sorted(pks)[:k])
        self._members[t] = members
        with self.clock.timer() as el:
            cpk = core.server_setup_aggregate({m: pks[m] for m in members}, self.p1, expected=members)
        self.server_ms[t] += el.ms
        rec.selection = core.Selection(members, {m: 1 for m in members})
        cb = CpkBroadcast(cpk.p0, cpk.p1, members)
        self._emit(out, self._out(MsgType.CPK_BCAST, t, cb.encode()))
        self.phase = Phase.UPLOAD

    def _close_upload(self, out: list[Envelope]) -> None:
        t = self.round
        rec = self.records[t]
        dim = self._decode_uploads(rec, self._take(MsgType.CT_UPLOAD, t, self.roster))
        if rec.aborted is None and not rec.uploads:
            self._abort(rec, "no uploads")
        if rec.aborted is not None:
            self._finish_round(out, rec)
            return
        self._dim[t] = dim
        try:
            with self.clock.timer() as el:
                rec.aggregate = core.server_aggregate_ciphertexts(rec.uploads)
            self.server_ms[t] += el.ms
        except ProtocolError as exc:
            self._abort(rec, str(exc))
            self._finish_round(out, rec)
            return
        agg = AggBroadcast(tuple(ct.c1 for ct in rec.aggregate))
        self._emit(out, self._out(MsgType.AGG_BCAST, t, agg.encode()))
        self.phase = Phase.SHARES

    def _close_shares(self, out: list[Envelope]) -> None:
        t = self.round
        rec = self.records[t]
        envs = self._take(MsgType.DEC_SHARE, t, self._members[t])
        self._finalize(rec, envs, self._dim[t], len(self._members[t]))
        self._finish_round(out, rec)
