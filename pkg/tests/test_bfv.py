from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsagg.bfv import (
    Ciphertext,
    PublicKey,
    SecretKey,
    aggregate_noise_bound,
    check_capacity,
    ciphertext_noise,
    ct_add,
    decode,
    decrypt,
    encode,
    encrypt,
    keygen_public,
    keygen_secret,
    max_smudging_bound,
    num_chunks,
    scale_and_round,
    validate_params,
)
from rsagg.errors import ParameterError
from rsagg.ring import RingElement, RingParams, ring_add, ring_mul, ring_sum, sample

from .oracles import center


def keypair(params, rng):
    sk = keygen_secret(params, rng)
    p1 = sample("uniform", params, rng)
    return sk, keygen_public(sk, p1, params, rng)


def test_keygen_deterministic_and_ternary():
    params = RingParams.production(n=1024)
    a = keygen_secret(params, np.random.default_rng(9))
    b = keygen_secret(params, np.random.default_rng(9))
    assert a.s == b.s
    assert set(np.unique(a.s.coeffs)) <= {-1, 0, 1}
    c = keygen_secret(params, np.random.default_rng(10))
    assert a.s != c.s


def test_public_key_hand_example(toy):
    s = SecretKey(RingElement(np.array([1, 0, 0, 0]), toy))
    p1 = RingElement(np.array([2, 0, 0, 0]), toy)
    e = RingElement(np.array([1, 0, 0, 0]), toy)
    pk = keygen_public(s, p1, toy, np.random.default_rng(0), error=e)
    assert pk.p0.tolist() == [-3, 0, 0, 0]


def test_public_key_zero_secret_zero_error(toy, rng):
    s = SecretKey(RingElement.zero(toy))
    pk = keygen_public(s, sample("uniform", toy, rng), toy, rng, error=RingElement.zero(toy))
    assert pk.p0 == RingElement.zero(toy)


def test_public_key_relation_bounded_by_error(rng):
    params = RingParams.production(n=256)
    for _ in range(5):
        sk, pk = keypair(params, rng)
        assert ring_add(pk.p0, ring_mul(sk.s, pk.p1)).inf_norm() <= params.error_bound


def test_encode_identity_packing(toy):
    g = [1, 2, 3, 4]
    chunks = encode(g, toy)
    assert len(chunks) == 1 and chunks[0].tolist() == g


def test_encode_empty(toy):
    assert encode([], toy) == []
    assert decode([], 0, toy).size == 0


def test_encode_padding(toy):
    n = toy.n
    g = np.arange(2 * n + 3) % 7
    chunks = encode(g, toy)
    assert len(chunks) == 3
    assert chunks[2][3:].tolist() == [0] * (n - 3)
    assert decode(chunks, g.size, toy).tolist() == g.tolist()


def test_decode_zero_chunk(toy):
    assert decode([np.zeros(toy.n, dtype=np.int64)], toy.n, toy).tolist() == [0] * toy.n


def test_chunk_count_for_large_vectors():
    assert num_chunks(200_000, RingParams.production()) == 25


def test_encode_rejects_out_of_range_with_index(toy):
    with pytest.raises(ValueError, match="index 2"):
        encode([0, 1, 8, 0], toy)
    with pytest.raises(ValueError):
        encode([-9], toy)
    encode([-8, 7], toy)


@given(st.lists(st.integers(-8, 7), min_size=0, max_size=23))
def test_encode_decode_round_trip(g):
    toy = RingParams.toy()
    assert decode(encode(g, toy), len(g), toy).tolist() == g


def test_encrypt_with_zero_randomness(toy):
    sk, pk = keypair(toy, np.random.default_rng(0))
    z = RingElement.zero(toy)
    m = np.array([1, -2, 3, 0])
    ct = encrypt(pk, m, toy, np.random.default_rng(0), u=z, e0=z, e1=z)
    assert ct.c0.tolist() == [center(toy.delta * v, toy.q) for v in m]
    assert ct.c1 == z
    assert toy.delta == 4096


@given(st.lists(st.integers(-8, 7), min_size=4, max_size=4), st.integers(0, 2**32))
def test_round_trip_toy(m, seed):
    toy = RingParams.toy()
    rng = np.random.default_rng(seed)
    sk, pk = keypair(toy, rng)
    ct = encrypt(pk, np.array(m), toy, rng)
    assert decrypt(sk, ct, toy).tolist() == m


def test_fresh_noise_within_single_party_bound(rng):
    for params in (RingParams.toy(), RingParams.production(n=512)):
        for _ in range(10):
            sk, pk = keypair(params, rng)
            m = rng.integers(-(params.p // 2), params.p // 2, size=params.n)
            ct = encrypt(pk, m, params, rng)
            noise = ciphertext_noise(ct, sk.s, m, params)
            assert noise.inf_norm() <= params.error_bound * (2 * params.n + 1)


def test_decrypt_noiseless(toy):
    m = np.array([3, -1, 7, -8])
    ct = Ciphertext(RingElement(toy.delta * m, toy), RingElement.zero(toy))
    assert decrypt(SecretKey(sample("ternary", toy, np.random.default_rng(0))), ct, toy).tolist() == m.tolist()


def test_decrypt_rounding_threshold(toy):
    s = SecretKey(RingElement.zero(toy))
    m = np.array([1, 2, -3, 0])
    half = toy.delta // 2
    # any |e| < delta/2 rounds back to m
    for e in (half - 1, -(half - 1), 17, -17):
        ct = Ciphertext(RingElement(toy.delta * m + e, toy), RingElement.zero(toy))
        assert decrypt(s, ct, toy).tolist() == m.tolist()
    # past the threshold the value moves
    ct = Ciphertext(RingElement(toy.delta * m + half + 2, toy), RingElement.zero(toy))
    assert decrypt(s, ct, toy).tolist() != m.tolist()


@given(st.integers(-(2**59), 2**59))
def test_scale_and_round_matches_fraction_oracle(v):
    params = RingParams.production(n=4)
    f = Fraction(params.p * v, params.q)
    r = int(abs(f) + Fraction(1, 2))
    r = -r if f < 0 else r
    expect = center(r, params.p)
    assert scale_and_round(np.array([v, 0, 0, 0], dtype=np.int64), params)[0] == expect


def test_homomorphic_addition(rng):
    params = RingParams.production(n=256)
    sk, pk = keypair(params, rng)
    m1 = rng.integers(-1000, 1000, size=params.n)
    m2 = rng.integers(-1000, 1000, size=params.n)
    ct = ct_add(encrypt(pk, m1, params, rng), encrypt(pk, m2, params, rng))
    assert decrypt(sk, ct, params).tolist() == (m1 + m2).tolist()


def test_addition_wraps_mod_p(toy, rng):
    sk, pk = keypair(toy, rng)
    ct = ct_add(encrypt(pk, np.array([7, 0, 0, 0]), toy, rng), encrypt(pk, np.array([7, 0, 0, 0]), toy, rng))
    assert decrypt(sk, ct, toy)[0] == center(14, 16)


def test_ct_add_identity_and_commutativity(toy, rng):
    _, pk = keypair(toy, rng)
    a = encrypt(pk, np.array([1, 2, 3, 4]), toy, rng)
    b = encrypt(pk, np.array([-1, 0, 5, 2]), toy, rng)
    zero = Ciphertext(RingElement.zero(toy), RingElement.zero(toy))
    assert ct_add(a, zero) == a
    assert ct_add(a, b) == ct_add(b, a)


def test_ct_add_rejects_chunk_mismatch(toy, rng):
    _, pk = keypair(toy, rng)
    a = encrypt(pk, np.zeros(4, dtype=np.int64), toy, rng, chunk_index=0)
    b = encrypt(pk, np.zeros(4, dtype=np.int64), toy, rng, chunk_index=1)
    with pytest.raises(ParameterError):
        ct_add(a, b)


def test_collective_key_three_parties(toy, rng):
    p1 = sample("uniform", toy, rng)
    sks = [keygen_secret(toy, rng) for _ in range(3)]
    p0 = ring_sum(keygen_public(sk, p1, toy, rng).p0 for sk in sks)
    cpk = PublicKey(p0, p1)
    s = SecretKey(ring_sum(sk.s for sk in sks))
    m = np.array([1, 0, 0, 0])
    cts = [encrypt(cpk, m, toy, rng) for _ in range(3)]
    total = ct_add(ct_add(cts[0], cts[1]), cts[2])
    assert decrypt(s, total, toy).tolist() == [3, 0, 0, 0]


def test_validate_production_example():
    params = RingParams.production()
    report = validate_params(params, 8, 6)
    assert report.noise_bound == 20 * 8 * (2 * 8192 * 8 + 1) == 20_971_680
    assert report.ok
    top = max_smudging_bound(params, 8, 6)
    expect = (params.q - 1 - 2 * params.p * report.noise_bound) // (2 * params.p * 6)
    assert top == expect
    # about (2^39 - 2.1e7) / 6
    assert abs(top - (2**39 - 2.1e7) / 6) / top < 1e-3
    assert validate_params(params.replace(smudging_bound=top), 8, 6).ok
    assert not validate_params(params.replace(smudging_bound=top + 1), 8, 6).ok


def test_validate_zero_smudging_warns_but_passes():
    report = validate_params(RingParams.production(smudging_bound=0), 8, 6)
    assert report.ok
    assert report.smudging_bits == float("-inf")
    assert report.warnings


def test_validate_rejects_small_modulus():
    params = RingParams(n=1024, q=65537, p=256, smudging_bound=0)
    report = validate_params(params, 8, 6)
    assert not report.ok and report.violations
    assert any("FAILED" in line for line in report.lines())


def test_validate_threshold_range():
    assert not validate_params(RingParams.production(), 3, 4).ok
    assert not validate_params(RingParams.production(), 3, 0).ok


def test_smudging_bits_reported():
    params = RingParams.production()
    report = validate_params(params, 8, 6)
    expect = np.log2(6 * params.smudging_bound / (20 * 8 * (2 * 8192 * 8 + 1)))
    assert report.smudging_bits == pytest.approx(expect)


def test_aggregate_noise_bound_with_fewer_contributors():
    params = RingParams.production()
    assert aggregate_noise_bound(params, 8, 5) == 20 * 5 * (2 * 8192 * 8 + 1)


def test_capacity_check():
    params = RingParams.production()
    check_capacity(params, 8, (params.p // 2 - 1) // 8)
    with pytest.raises(ParameterError):
        check_capacity(params, 8, params.p // 16)
