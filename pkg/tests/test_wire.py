import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsagg.errors import FramingError
from rsagg.protocol import messages as M
from rsagg.ring import DEFAULT_Q, RingElement, RingParams, sample
from rsagg.transport.wire import (
    BROADCAST,
    HEADER_SIZE,
    SERVER_ID,
    WIRE_VERSION,
    Envelope,
    MsgType,
    Reader,
    Writer,
    deserialize_ring_element,
    parse_header,
    serialize_ring_element,
)

P64 = RingParams.production(n=64)
TOY = RingParams.toy()


def test_header_layout():
    env = Envelope(MsgType.CT_UPLOAD, 7, 3, SERVER_ID, b"abc")
    data = env.encode()
    assert HEADER_SIZE == 14
    assert data[:HEADER_SIZE] == struct.pack("<BBIHHI", WIRE_VERSION, 6, 7, 3, 0xFFFF, 3)
    assert Envelope.decode(data) == env
    assert env.type_name() == "CT_UPLOAD"
    assert Envelope(99, 0, 0, 0).type_name() == "UNKNOWN(99)"


@given(
    st.integers(0, 255),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**16 - 1),
    st.integers(0, 2**16 - 1),
    st.binary(max_size=300),
)
def test_envelope_round_trip(mtype, rnd, sender, receiver, payload):
    env = Envelope(mtype, rnd, sender, receiver, payload)
    assert Envelope.decode(env.encode()) == env


@given(st.binary(max_size=200))
def test_envelope_decoder_fuzz_only_framing_errors(data):
    try:
        env = Envelope.decode(data)
    except FramingError:
        return
    assert env.encode() == data


def test_decode_prefix_streams_several_envelopes():
    a = Envelope(1, 0, 1, SERVER_ID, b"x").encode()
    b = Envelope(2, 0, SERVER_ID, BROADCAST, b"yz").encode()
    env, used = Envelope.decode_prefix(a + b)
    assert used == len(a) and env.payload == b"x"
    assert Envelope.decode(a + b[:0]) is not None
    with pytest.raises(FramingError):
        Envelope.decode(a + b)


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"\x01" * 5,
        struct.pack("<BBIHHI", 2, 1, 0, 0, 0, 0),
        struct.pack("<BBIHHI", 1, 1, 0, 0, 0, 10) + b"short",
        struct.pack("<BBIHHI", 1, 1, 0, 0, 0, 2**31),
    ],
)
def test_malformed_envelopes(data):
    with pytest.raises(FramingError):
        Envelope.decode(data)


def test_parse_header_checks():
    with pytest.raises(FramingError):
        parse_header(b"123")
    assert parse_header(Envelope(3, 1, 2, 4, b"").encode())[1:] == (3, 1, 2, 4, 0)


def test_header_field_overflow_is_framing_error():
    with pytest.raises(FramingError):
        Envelope(1, 2**32, 0, 0).encode()
    with pytest.raises(FramingError):
        Envelope(1, 0, 2**16, 0).encode()


def test_zero_ring_element_bytes():
    assert serialize_ring_element(RingElement.zero(TOY)) == bytes(32)


def test_minus_one_serializes_as_q_minus_one():
    params = RingParams(n=4, q=DEFAULT_Q, p=2)
    a = RingElement(np.array([-1, 0, 0, 0]), params)
    assert int.from_bytes(serialize_ring_element(a)[:8], "little") == DEFAULT_Q - 1


def test_ring_round_trip_many():
    rng = np.random.default_rng(0)
    params = RingParams(n=4, q=DEFAULT_Q, p=2)
    for _ in range(10_000):
        a = sample("uniform", params, rng)
        assert deserialize_ring_element(serialize_ring_element(a), params) == a


def test_ring_decoder_rejects_bad_input():
    with pytest.raises(FramingError):
        deserialize_ring_element(bytes(31), TOY)
    with pytest.raises(FramingError):
        deserialize_ring_element((TOY.q).to_bytes(8, "little") + bytes(24), TOY)


def test_writer_reader_round_trip():
    w = Writer().u8(1).u16(2).u32(3).u64(2**60).f64(0.5).bytes_(b"hey").zq(-3, 17).ring(RingElement.zero(TOY))
    r = Reader(w.getvalue())
    assert (r.u8(), r.u16(), r.u32(), r.u64(), r.f64(), r.bytes_(), r.zq(17)) == (1, 2, 3, 2**60, 0.5, b"hey", -3)
    assert r.ring(TOY) == RingElement.zero(TOY)
    r.done()
    with pytest.raises(FramingError):
        r.u8()


def test_reader_trailing_bytes():
    r = Reader(b"\x01\x02")
    r.u8()
    with pytest.raises(FramingError):
        r.done()


# ------------------------------------------------------------ payload codecs


def _elements(n, params=P64, seed=0):
    rng = np.random.default_rng(seed)
    return tuple(sample("uniform", params, rng) for _ in range(n))


def test_payload_round_trips():
    from rsagg.bfv import Ciphertext

    a, b, c = _elements(3)
    cases = [
        (M.Register(bytes(32), True), lambda d: M.Register.decode(d)),
        (M.RingPayload(a), lambda d: M.RingPayload.decode(d, P64)),
        (M.CpkBroadcast(a, b, (0, 1, 2)), lambda d: M.CpkBroadcast.decode(d, P64)),
        (M.CtUpload(100, (Ciphertext(a, b, 0), Ciphertext(c, a, 1))), lambda d: M.CtUpload.decode(d, P64)),
        (M.AggBroadcast((a, b)), lambda d: M.AggBroadcast.decode(d, P64)),
        (M.DecShare((a,)), lambda d: M.DecShare.decode(d, P64)),
        (M.RoundResult(M.RoundStatus.OK, False, np.array([1, -2, 3]), b"model", ""), M.RoundResult.decode),
        (M.RoundResult(M.RoundStatus.ABORTED, True, None, b"", "too few"), M.RoundResult.decode),
        (M.NewUserRequest(12), M.NewUserRequest.decode),
    ]
    for obj, dec in cases:
        got = dec(obj.encode())
        for field in obj.__dataclass_fields__:
            x, y = getattr(obj, field), getattr(got, field)
            if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
                assert np.array_equal(x, y)
            else:
                assert x == y, field
    sel = M.SelectCoeffs(-5, (0, 3, 4))
    assert M.SelectCoeffs.decode(sel.encode(P64.q), P64.q) == sel


def test_setup_params_round_trip():
    p1 = _elements(1)[0]
    roster = tuple(M.RosterEntry(c, c + 1, bytes([c]) * 32) for c in range(3))
    sp = M.SetupParams(P64, 3, 2, p1, roster, late=True, helpers=(0, 1), per_round=False)
    got = M.SetupParams.decode(sp.encode())
    assert got == sp


def test_share_plain_round_trip():
    a = _elements(1)[0]
    x, val = M.decode_share_plain(M.encode_share_plain(a, 9), P64)
    assert x == 9 and val == a


DECODERS = [
    ("register", lambda d: M.Register.decode(d)),
    ("setup", lambda d: M.SetupParams.decode(d)),
    ("ring", lambda d: M.RingPayload.decode(d, TOY)),
    ("blob", lambda d: M.BlobPayload.decode(d)),
    ("cpk", lambda d: M.CpkBroadcast.decode(d, TOY)),
    ("upload", lambda d: M.CtUpload.decode(d, TOY)),
    ("agg", lambda d: M.AggBroadcast.decode(d, TOY)),
    ("select", lambda d: M.SelectCoeffs.decode(d, TOY.q)),
    ("decshare", lambda d: M.DecShare.decode(d, TOY)),
    ("result", lambda d: M.RoundResult.decode(d)),
    ("newuser", lambda d: M.NewUserRequest.decode(d)),
    ("helper", lambda d: M.HelperRequest.decode(d, TOY.q)),
    ("share", lambda d: M.decode_share_plain(d, TOY)),
]


@pytest.mark.parametrize("name,decoder", DECODERS, ids=[d[0] for d in DECODERS])
@given(data=st.binary(max_size=160))
def test_payload_decoders_fuzz_only_framing_errors(name, decoder, data):
    try:
        decoder(data)
    except FramingError:
        pass


@pytest.mark.parametrize("name,decoder", DECODERS, ids=[d[0] for d in DECODERS])
def test_payload_decoders_on_truncations(name, decoder):
    # truncations of a valid upload-like prefix must also fail cleanly
    rng = np.random.default_rng(1)
    blob = rng.bytes(120)
    for cut in range(0, 120, 7):
        try:
            decoder(blob[:cut])
        except FramingError:
            pass
