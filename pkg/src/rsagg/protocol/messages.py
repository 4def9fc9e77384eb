"""Typed payloads for every protocol message and their byte codecs.

Each payload class has ``encode() -> bytes`` and ``decode(data, ...)``;
decoding malformed bytes raises :class:`~rsagg.errors.FramingError` only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..bfv import Ciphertext
from ..errors import FramingError, ParameterError
from ..ring import RingElement, RingParams
from ..transport.secure import PUBKEY_SIZE
from ..transport.wire import Reader, Writer


def _pubkey(r: Reader) -> bytes:
    k = r.bytes_()
    if len(k) != PUBKEY_SIZE:
        raise FramingError(f"transport key must be {PUBKEY_SIZE} bytes")
    return k


@dataclass(frozen=True)
class Register:
    pubkey: bytes
    is_new: bool = False

    def encode(self) -> bytes:
        return Writer().bytes_(self.pubkey).u8(int(self.is_new)).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Register":
        r = Reader(data)
        key = _pubkey(r)
        flag = r.u8()
        r.done()
        return cls(key, bool(flag))


def write_params(w: Writer, params: RingParams) -> None:
    w.u32(params.n).u64(params.q).u64(params.p).f64(params.sigma)
    w.u32(params.error_bound).u64(params.smudging_bound)


def read_params(r: Reader) -> RingParams:
    n, q, p, sigma, bound, smg = r.u32(), r.u64(), r.u64(), r.f64(), r.u32(), r.u64()
    if not math.isfinite(sigma):
        raise FramingError("non-finite sigma")
    try:
        return RingParams(n=n, q=q, p=p, sigma=sigma, error_bound=bound, smudging_bound=smg)
    except (ParameterError, ValueError) as exc:
        raise FramingError(f"invalid parameters on the wire: {exc}") from None


@dataclass(frozen=True)
class RosterEntry:
    client_id: int
    x: int
    pubkey: bytes


@dataclass(frozen=True)
class SetupParams:
    """Server to client: ring parameters, the common polynomial and the roster.

    ``late`` marks the message sent to a joining user; ``helpers`` then lists
    the clients that will send it auxiliary shares. ``per_round`` marks the
    baseline that redoes key generation every round.
    """

    params: RingParams
    n_clients: int
    threshold: int
    p1: RingElement
    roster: tuple[RosterEntry, ...]
    late: bool = False
    helpers: tuple[int, ...] = ()
    per_round: bool = False

    def encode(self) -> bytes:
        w = Writer()
        write_params(w, self.params)
        w.u32(self.n_clients).u32(self.threshold).ring(self.p1)
        w.u32(len(self.roster))
        for e in self.roster:
            w.u16(e.client_id).u64(e.x).bytes_(e.pubkey)
        w.u8(int(self.late) | int(self.per_round) << 1).u32(len(self.helpers))
        for h in self.helpers:
            w.u16(h)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SetupParams":
        r = Reader(data)
        params = read_params(r)
        n_clients, threshold = r.u32(), r.u32()
        p1 = r.ring(params)
        count = r.u32()
        if count > 0xFFFF:
            raise FramingError("roster too large")
        roster = tuple(RosterEntry(r.u16(), r.u64(), _pubkey(r)) for _ in range(count))
        flags = r.u8()
        if flags > 3:
            raise FramingError("unknown setup flags")
        nh = r.u32()
        if nh > 0xFFFF:
            raise FramingError("helper list too large")
        helpers = tuple(r.u16() for _ in range(nh))
        r.done()
        return cls(params, n_clients, threshold, p1, roster, bool(flags & 1), helpers, bool(flags & 2))


@dataclass(frozen=True)
class RingPayload:
    """One ring element: PK_SHARE."""

    value: RingElement

    def encode(self) -> bytes:
        return Writer().ring(self.value).getvalue()

    @classmethod
    def decode(cls, data: bytes, params: RingParams) -> "RingPayload":
        r = Reader(data)
        v = r.ring(params)
        r.done()
        return cls(v)


@dataclass(frozen=True)
class BlobPayload:
    """An opaque relayed blob: SECRET_SHARE and AUX_SHARE."""

    blob: bytes

    def encode(self) -> bytes:
        return Writer().bytes_(self.blob).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "BlobPayload":
        r = Reader(data)
        b = r.bytes_()
        r.done()
        return cls(b)


@dataclass(frozen=True)
class CpkBroadcast:
    """Collective public key; ``members`` is the ASA decryptor set (empty for RSA)."""

    p0: RingElement
    p1: RingElement
    members: tuple[int, ...] = ()

    def encode(self) -> bytes:
        w = Writer().ring(self.p0).ring(self.p1).u32(len(self.members))
        for m in self.members:
            w.u16(m)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, params: RingParams) -> "CpkBroadcast":
        r = Reader(data)
        p0, p1 = r.ring(params), r.ring(params)
        count = r.u32()
        if count > 0xFFFF:
            raise FramingError("member list too large")
        members = tuple(r.u16() for _ in range(count))
        r.done()
        return cls(p0, p1, members)


@dataclass(frozen=True)
class CtUpload:
    dim: int
    chunks: tuple[Ciphertext, ...]

    def encode(self) -> bytes:
        w = Writer().u32(self.dim).u32(len(self.chunks))
        for ct in self.chunks:
            w.ring(ct.c0).ring(ct.c1)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, params: RingParams) -> "CtUpload":
        r = Reader(data)
        dim, count = r.u32(), r.u32()
        if count != -(-dim // params.n):
            raise FramingError(f"{count} chunks do not match dimension {dim}")
        chunks = tuple(Ciphertext(r.ring(params), r.ring(params), j) for j in range(count))
        r.done()
        return cls(dim, chunks)


@dataclass(frozen=True)
class AggBroadcast:
    """The c1 halves of the aggregate ciphertext (all decryptors need)."""

    c1: tuple[RingElement, ...]

    def encode(self) -> bytes:
        w = Writer().u32(len(self.c1))
        for c in self.c1:
            w.ring(c)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, params: RingParams) -> "AggBroadcast":
        r = Reader(data)
        count = r.u32()
        if count * 8 * params.n > r.remaining():
            raise FramingError("aggregate broadcast truncated")
        c1 = tuple(r.ring(params) for _ in range(count))
        r.done()
        return cls(c1)


@dataclass(frozen=True)
class SelectCoeffs:
    coeff: int
    selected: tuple[int, ...]

    def encode(self, q: int) -> bytes:
        w = Writer().zq(self.coeff, q).u32(len(self.selected))
        for s in self.selected:
            w.u16(s)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, q: int) -> "SelectCoeffs":
        r = Reader(data)
        coeff = r.zq(q)
        count = r.u32()
        if count > 0xFFFF:
            raise FramingError("selection too large")
        sel = tuple(r.u16() for _ in range(count))
        r.done()
        return cls(coeff, sel)


@dataclass(frozen=True)
class DecShare:
    shares: tuple[RingElement, ...]

    def encode(self) -> bytes:
        w = Writer().u32(len(self.shares))
        for h in self.shares:
            w.ring(h)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, params: RingParams) -> "DecShare":
        r = Reader(data)
        count = r.u32()
        if count * 8 * params.n > r.remaining():
            raise FramingError("decryption share truncated")
        hs = tuple(r.ring(params) for _ in range(count))
        r.done()
        return cls(hs)


class RoundStatus(enum.IntEnum):
    OK = 0
    ABORTED = 1


@dataclass(frozen=True)
class RoundResult:
    """Outcome of round t; ``final`` tells clients no round follows."""

    status: RoundStatus
    final: bool
    aggregate: np.ndarray | None = None
    extra: bytes = b""
    reason: str = ""

    def encode(self) -> bytes:
        w = Writer().u8(int(self.status)).u8(int(self.final))
        agg = np.zeros(0, dtype=np.int64) if self.aggregate is None else self.aggregate
        w.u32(agg.size)
        w.raw(np.asarray(agg, dtype="<i8").tobytes())
        w.bytes_(self.extra).bytes_(self.reason.encode("utf-8"))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "RoundResult":
        r = Reader(data)
        try:
            status = RoundStatus(r.u8())
        except ValueError:
            raise FramingError("unknown round status") from None
        final = bool(r.u8())
        size = r.u32()
        agg = np.frombuffer(r.raw(8 * size), dtype="<i8").astype(np.int64)
        extra = r.bytes_()
        try:
            reason = r.bytes_().decode("utf-8")
        except UnicodeDecodeError:
            raise FramingError("reason is not utf-8") from None
        r.done()
        return cls(status, final, agg if status == RoundStatus.OK else None, extra, reason)


@dataclass(frozen=True)
class NewUserRequest:
    """Sent by a joining client: the evaluation point it asks for."""

    x_new: int

    def encode(self) -> bytes:
        return Writer().u64(self.x_new).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "NewUserRequest":
        r = Reader(data)
        x = r.u64()
        r.done()
        return cls(x)


@dataclass(frozen=True)
class HelperRequest:
    """Server to helper: evaluate your auxiliary polynomial at ``x_new``.

    ``column`` holds this helper's reconstruction coefficients for the
    constant term and each blinding term, lowest degree first.
    """

    new_id: int
    x_new: int
    pubkey: bytes
    column: tuple[int, ...] = field(default_factory=tuple)

    def encode(self, q: int) -> bytes:
        w = Writer().u16(self.new_id).u64(self.x_new).bytes_(self.pubkey).u32(len(self.column))
        for c in self.column:
            w.zq(c, q)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, q: int) -> "HelperRequest":
        r = Reader(data)
        new_id, x_new, key = r.u16(), r.u64(), _pubkey(r)
        count = r.u32()
        if count * 8 > r.remaining():
            raise FramingError("coefficient column truncated")
        col = tuple(r.zq(q) for _ in range(count))
        r.done()
        return cls(new_id, x_new, key, col)


def encode_share_plain(value: RingElement, x: int) -> bytes:
    """Inner plaintext of a SECRET_SHARE or AUX_SHARE blob."""
    return Writer().u64(x).ring(value).getvalue()


def decode_share_plain(data: bytes, params: RingParams) -> tuple[int, RingElement]:
    r = Reader(data)
    x = r.u64()
    v = r.ring(params)
    r.done()
    return x, v
