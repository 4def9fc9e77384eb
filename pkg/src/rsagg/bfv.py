"""Additive BFV: keys, coefficient packing, encryption and decryption.

Only the additive homomorphism is provided. Plaintext polynomials are plain
``int64`` arrays of length n with centered entries in ``[-p/2, p/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .ring import RingElement, RingParams, centered, ring_add, ring_mul, sample


@dataclass(frozen=True)
class SecretKey:
    s: RingElement


@dataclass(frozen=True)
class PublicKey:
    p0: RingElement
    p1: RingElement


@dataclass(frozen=True)
class Ciphertext:
    c0: RingElement
    c1: RingElement
    chunk_index: int = 0

    def __post_init__(self):
        if self.c0.params != self.c1.params:
            raise ParameterError("ciphertext halves use different parameters")

    @property
    def params(self) -> RingParams:
        return self.c0.params


def keygen_secret(params: RingParams, rng: np.random.Generator) -> SecretKey:
    return SecretKey(sample("ternary", params, rng))


def keygen_public(
    sk: SecretKey,
    p1: RingElement,
    params: RingParams,
    rng: np.random.Generator,
    *,
    error: RingElement | None = None,
) -> PublicKey:
    """``(-(s*p1 + e), p1)`` with a fresh error unless one is supplied."""
    e = sample("error", params, rng) if error is None else error
    p0 = -(ring_add(ring_mul(sk.s, p1), e))
    return PublicKey(p0, p1)


def check_plaintext_range(values: np.ndarray, params: RingParams) -> None:
    lo, hi = params.plaintext_range
    bad = np.flatnonzero((values < lo) | (values >= hi))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"value {int(values[i])} at index {i} outside plaintext range [{lo}, {hi})")


def num_chunks(d: int, params: RingParams) -> int:
    return -(-d // params.n)


def encode(values: Sequence[int], params: RingParams) -> list[np.ndarray]:
    """Pack a length-d integer vector into ceil(d/n) coefficient chunks."""
    g = np.asarray(values, dtype=np.int64).reshape(-1)
    check_plaintext_range(g, params)
    n = params.n
    chunks = []
    for j in range(num_chunks(g.size, params)):
        m = np.zeros(n, dtype=np.int64)
        part = g[j * n : (j + 1) * n]
        m[: part.size] = part
        chunks.append(m)
    return chunks


def decode(polys: Sequence[np.ndarray], d: int, params: RingParams) -> np.ndarray:
    if len(polys) != num_chunks(d, params):
        raise ValueError(f"{len(polys)} chunks cannot hold a vector of dimension {d}")
    if d == 0:
        return np.zeros(0, dtype=np.int64)
    flat = np.concatenate([np.asarray(m, dtype=np.int64) for m in polys])
    return flat[:d].copy()


def encrypt(
    pk: PublicKey,
    m: np.ndarray,
    params: RingParams,
    rng: np.random.Generator,
    *,
    chunk_index: int = 0,
    u: RingElement | None = None,
    e0: RingElement | None = None,
    e1: RingElement | None = None,
) -> Ciphertext:
    """``(delta*m + u*p0 + e0, u*p1 + e1)``; randomness may be pinned for tests."""
    m = np.asarray(m, dtype=np.int64)
    check_plaintext_range(m, params)
    u = sample("ternary", params, rng) if u is None else u
    e0 = sample("error", params, rng) if e0 is None else e0
    e1 = sample("error", params, rng) if e1 is None else e1
    # |delta*m| <= q/2 so the int64 product is exact
    scaled = RingElement(params.delta * m, params)
    c0 = ring_add(ring_add(scaled, ring_mul(u, pk.p0)), e0)
    c1 = ring_add(ring_mul(u, pk.p1), e1)
    return Ciphertext(c0, c1, chunk_index)


def scale_and_round(v: np.ndarray, params: RingParams) -> np.ndarray:
    """Centered-mod-p of round(p*v/q), half away from zero, in exact integers."""
    p, q = params.p, params.q
    out = np.empty(v.shape[0], dtype=np.int64)
    for i, x in enumerate(v.tolist()):
        r = (2 * p * abs(x) + q) // (2 * q)
        out[i] = centered(-r if x < 0 else r, p)
    return out


def decrypt(sk: SecretKey, ct: Ciphertext, params: RingParams) -> np.ndarray:
    v = ring_add(ct.c0, ring_mul(ct.c1, sk.s))
    return scale_and_round(v.coeffs, params)


def ct_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.chunk_index != b.chunk_index:
        raise ParameterError(f"chunk mismatch: {a.chunk_index} vs {b.chunk_index}")
    return Ciphertext(ring_add(a.c0, b.c0), ring_add(a.c1, b.c1), a.chunk_index)


def ciphertext_noise(ct: Ciphertext, s: RingElement, m: np.ndarray, params: RingParams) -> RingElement:
    """``c0 + s*c1 - delta*m``, the noise a key holder would see."""
    v = ring_add(ct.c0, ring_mul(ct.c1, s))
    return v - RingElement(params.delta * np.asarray(m, dtype=np.int64), params)


@dataclass
class ParamReport:
    """Outcome of checking the aggregate decryption-noise inequality."""

    ok: bool
    n_clients: int
    threshold: int
    noise_bound: int
    smudging_total: int
    limit: float
    smudging_bits: float
    min_smudging_bits: float
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [
            f"clients={self.n_clients} threshold={self.threshold}",
            f"ciphertext noise bound B*N*(2nN+1) = {self.noise_bound}",
            f"smudging total k*B_smg = {self.smudging_total}",
            f"decryption limit q/(2p) = {self.limit:.6g}",
            f"lhs / limit = {(self.noise_bound + self.smudging_total) / self.limit:.3g}",
            f"effective smudging bits = {self.smudging_bits:.2f} (target {self.min_smudging_bits:g})",
        ]
        out += [f"VIOLATION: {v}" for v in self.violations]
        out += [f"WARNING: {w}" for w in self.warnings]
        out.append("status: " + ("ok" if self.ok else "FAILED"))
        return out


def aggregate_noise_bound(params: RingParams, n_setup: int, n_contributors: int | None = None) -> int:
    """Worst-case inf-norm of the summed ciphertext noise, ``B*C*(2nN+1)``."""
    c = n_setup if n_contributors is None else n_contributors
    return params.error_bound * c * (2 * params.n * n_setup + 1)


def validate_params(
    params: RingParams, n_clients: int, threshold: int, *, min_smudging_bits: float = 40.0
) -> ParamReport:
    """Check ``B*N*(2nN+1) + k*B_smg < q/(2p)`` and report the smudging ratio."""
    violations, warnings = [], []
    if not 1 <= threshold <= n_clients:
        violations.append(f"threshold k={threshold} must satisfy 1 <= k <= N={n_clients}")
    noise = aggregate_noise_bound(params, n_clients)
    smg = threshold * params.smudging_bound
    # strict inequality in integers: 2p * lhs < q
    if 2 * params.p * (noise + smg) >= params.q:
        violations.append(
            f"B*N*(2nN+1) + k*B_smg = {noise + smg} is not below q/(2p) = {params.q / (2 * params.p):.6g}"
        )
    if smg == 0 or noise == 0:
        bits = -math.inf if smg == 0 else math.inf
    else:
        bits = math.log2(smg / noise)
    if bits < min_smudging_bits:
        warnings.append(
            f"smudging ratio 2^{bits:.2f} is below the configured 2^{min_smudging_bits:g}"
        )
    return ParamReport(
        ok=not violations,
        n_clients=n_clients,
        threshold=threshold,
        noise_bound=noise,
        smudging_total=smg,
        limit=params.q / (2 * params.p),
        smudging_bits=bits,
        min_smudging_bits=min_smudging_bits,
        violations=violations,
        warnings=warnings,
    )


def max_smudging_bound(params: RingParams, n_clients: int, threshold: int) -> int:
    """Largest B_smg that still satisfies the decryption inequality (0 if none)."""
    noise = aggregate_noise_bound(params, n_clients)
    # largest b with 2p*(noise + k*b) < q
    room = params.q - 1 - 2 * params.p * noise
    if room < 0:
        return 0
    return room // (2 * params.p * threshold)


def check_capacity(params: RingParams, n_clients: int, max_abs: int) -> None:
    """Reject inputs whose plaintext sum could wrap modulo p."""
    if n_clients * max_abs >= params.p // 2:
        raise ParameterError(
            f"aggregate capacity exceeded: {n_clients} * {max_abs} >= p/2 = {params.p // 2}"
        )
