"""Exact arithmetic in R_q = Z_q[X]/(X^n + 1) and the samplers built on it.

Coefficients are stored as centered ``int64`` values in ``[-q/2, q/2)``.
Products are computed by Kronecker substitution: both operands are packed
into one big integer, multiplied with GMP, unpacked and folded with
``X^n = -1``. The result is identical to schoolbook negacyclic convolution.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Union

import gmpy2
import numpy as np

from .errors import ParameterError

# GMP multiplication is ~10x faster than CPython's Karatsuba at n=8192
_bigint = gmpy2.mpz
_is_prime = gmpy2.is_prime


# 60-bit prime with q = 1 (mod 2*8192), so NTT-friendly at n <= 8192.
DEFAULT_Q = 1152921504606830593
MAX_MODULUS_BITS = 62

SAMPLE_KINDS = ("ternary", "error", "uniform", "smudging")


class OpCounter:
    """Running totals of ring products and vector work, for the simulated clock."""

    __slots__ = ("ring_mul", "scalar_mul", "work")

    def __init__(self):
        self.ring_mul = 0
        self.scalar_mul = 0
        self.work = 0

    def snapshot(self) -> tuple[int, int, int]:
        return self.ring_mul, self.scalar_mul, self.work


OPS = OpCounter()


def centered(x, m: int):
    """Reduce integers (scalar or array) into ``[-m/2, m/2)``."""
    if isinstance(x, np.ndarray):
        r = np.mod(x, m)
        half = (m + 1) // 2
        if r.dtype == object:
            return np.array([v - m if v >= half else v for v in r], dtype=object)
        return np.where(r >= half, r - m, r)
    r = int(x) % m
    return r - m if r >= (m + 1) // 2 else r


@dataclass(frozen=True)
class RingParams:
    """Parameter record for the ring, the plaintext space and the noise samplers.

    ``error_bound`` defaults to ``ceil(6 * sigma)``. ``smudging_bound`` is the
    half-width of the uniform noise added to decryption shares.
    """

    n: int
    q: int
    p: int
    sigma: float = 3.2
    error_bound: int | None = None
    smudging_bound: int = 0

    def __post_init__(self):
        n, q, p = self.n, self.q, self.p
        if n < 1 or n & (n - 1):
            raise ParameterError(f"n must be a power of two, got {n}")
        if not 1 <= p < q:
            raise ParameterError(f"need 1 <= p < q, got p={p}, q={q}")
        if q.bit_length() > MAX_MODULUS_BITS:
            raise ParameterError(f"q must be below 2^{MAX_MODULUS_BITS}")
        if not _is_prime(q):
            raise ParameterError(f"q={q} is not prime")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")
        if self.error_bound is None:
            object.__setattr__(self, "error_bound", math.ceil(6 * self.sigma))
        if self.error_bound < 0:
            raise ParameterError("error_bound must be non-negative")
        if self.smudging_bound < 0:
            raise ParameterError("smudging_bound must be non-negative")
        if 2 * self.smudging_bound >= q:
            raise ParameterError("smudging_bound >= q/2 would alias modulo q")

    @property
    def delta(self) -> int:
        return self.q // self.p

    @property
    def plaintext_range(self) -> tuple[int, int]:
        """Half-open range ``[lo, hi)`` of centered plaintext values."""
        return -(self.p // 2), self.p - self.p // 2

    def replace(self, **changes) -> "RingParams":
        if "sigma" in changes and "error_bound" not in changes:
            changes["error_bound"] = None
        return dataclasses.replace(self, **changes)

    @classmethod
    def production(cls, **overrides) -> "RingParams":
        """n=8192, 60-bit q, p=2^20, B=20, B_smg=2^32."""
        kw = dict(n=8192, q=DEFAULT_Q, p=1 << 20, sigma=3.2, smudging_bound=1 << 32)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def toy(cls, **overrides) -> "RingParams":
        """n=4, q=65537, p=16 (delta=4096); no smudging by default."""
        kw = dict(n=4, q=65537, p=16, sigma=3.2, smudging_bound=0)
        kw.update(overrides)
        return cls(**kw)


def _check_same(a: "RingElement", b: "RingElement") -> None:
    if a.params != b.params:
        raise ParameterError("parameter mismatch between ring elements")


class RingElement:
    """Immutable polynomial of degree < n with centered coefficients mod q."""

    __slots__ = ("coeffs", "params")

    def __init__(self, coeffs, params: RingParams):
        arr = np.asarray(coeffs)
        if arr.shape != (params.n,):
            raise ParameterError(f"expected {params.n} coefficients, got shape {arr.shape}")
        if arr.dtype == object or arr.dtype.kind not in "iu":
            arr = np.array([centered(int(v), params.q) for v in arr], dtype=np.int64)
        else:
            arr = centered(arr.astype(np.int64), params.q)
        arr.setflags(write=False)
        self.coeffs = arr
        self.params = params

    @classmethod
    def zero(cls, params: RingParams) -> "RingElement":
        return cls(np.zeros(params.n, dtype=np.int64), params)

    @classmethod
    def _raw(cls, arr: np.ndarray, params: RingParams) -> "RingElement":
        # arr is already centered int64 of the right length
        obj = cls.__new__(cls)
        arr.setflags(write=False)
        obj.coeffs = arr
        obj.params = params
        return obj

    def __add__(self, other: "RingElement") -> "RingElement":
        return ring_add(self, other)

    def __sub__(self, other: "RingElement") -> "RingElement":
        _check_same(self, other)
        return RingElement._raw(centered(self.coeffs - other.coeffs, self.params.q), self.params)

    def __neg__(self) -> "RingElement":
        return RingElement._raw(centered(-self.coeffs, self.params.q), self.params)

    def __mul__(self, other: Union["RingElement", int]) -> "RingElement":
        if isinstance(other, RingElement):
            return ring_mul(self, other)
        if isinstance(other, (int, np.integer)):
            return scalar_mul(self, int(other))
        return NotImplemented

    def __rmul__(self, other: int) -> "RingElement":
        if isinstance(other, (int, np.integer)):
            return scalar_mul(self, int(other))
        return NotImplemented

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingElement):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None

    def __repr__(self) -> str:
        head = ", ".join(str(int(c)) for c in self.coeffs[:6])
        more = ", ..." if self.params.n > 6 else ""
        return f"RingElement([{head}{more}], n={self.params.n})"

    def inf_norm(self) -> int:
        return inf_norm(self)

    def tolist(self) -> list[int]:
        return [int(c) for c in self.coeffs]


def ring_add(a: RingElement, b: RingElement) -> RingElement:
    _check_same(a, b)
    # |a|, |b| < 2^61 so the int64 sum cannot overflow
    return RingElement._raw(centered(a.coeffs + b.coeffs, a.params.q), a.params)


def ring_sum(elements: Iterable[RingElement]) -> RingElement:
    it = iter(elements)
    acc = next(it)
    for e in it:
        acc = ring_add(acc, e)
    return acc


def _slot_bytes(n: int, q: int) -> int:
    # each product coefficient is < n * q^2
    bits = 2 * q.bit_length() + n.bit_length() + 1
    return -(-bits // 64) * 8


def _pack(coeffs: np.ndarray, q: int, slot: int):
    n = coeffs.shape[0]
    nonneg = np.mod(coeffs, q).astype("<u8")
    buf = np.zeros((n, slot), dtype=np.uint8)
    buf[:, :8] = nonneg.view(np.uint8).reshape(n, 8)
    return _bigint(int.from_bytes(buf.tobytes(), "little"))


def ring_mul(a: RingElement, b: RingElement) -> RingElement:
    """Negacyclic product ``a * b mod (X^n + 1, q)``."""
    _check_same(a, b)
    OPS.ring_mul += 1
    params = a.params
    n, q = params.n, params.q
    slot = _slot_bytes(n, q)
    prod = _pack(a.coeffs, q, slot) * _pack(b.coeffs, q, slot)
    raw = int(prod).to_bytes(2 * n * slot, "little")
    limbs = np.frombuffer(raw, dtype="<u8").reshape(2 * n, slot // 8)
    full = limbs[:, 0].astype(object)
    for j in range(1, slot // 8):
        full = full + (limbs[:, j].astype(object) << (64 * j))
    folded = (full[:n] - full[n:]) % q
    out = np.array(folded.tolist(), dtype=np.int64)
    return RingElement._raw(centered(out, q), params)


def _add_mod(x: np.ndarray, y: np.ndarray, q: int) -> np.ndarray:
    s = x + y
    return np.where(s >= q, s - q, s)


def scalar_mul(a: RingElement, c: int) -> RingElement:
    """Multiply every coefficient by the integer ``c`` modulo q.

    Double-and-add over the bits of the centered scalar keeps every
    intermediate below 2q < 2^63, so small scalars (evaluation points) are
    cheap and large ones (Lagrange coefficients) stay exact.
    """
    OPS.scalar_mul += 1
    q = a.params.q
    c = centered(c, q)
    negate = c < 0
    c = -c if negate else c
    base = np.mod(a.coeffs, q)
    acc = np.zeros_like(base)
    while c:
        if c & 1:
            acc = _add_mod(acc, base, q)
        c >>= 1
        if c:
            base = _add_mod(base, base, q)
    out = centered(acc, q)
    if negate:
        out = centered(-out, q)
    return RingElement._raw(out, a.params)


def inf_norm(a: RingElement) -> int:
    if a.params.n == 0:
        return 0
    return int(np.max(np.abs(a.coeffs)))


def _discrete_gaussian(n: int, sigma: float, bound: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    if bound == 0 or sigma == 0:
        return out
    pending = np.arange(n)
    while pending.size:
        draw = np.rint(rng.normal(0.0, sigma, size=pending.size)).astype(np.int64)
        ok = np.abs(draw) <= bound
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]
    return out


def sample(kind: str, params: RingParams, rng: np.random.Generator) -> RingElement:
    """Draw a ring element from one of the protocol's distributions.

    ``ternary``: uniform on {-1, 0, 1}; ``error``: rounded Gaussian truncated
    to ``[-B, B]``; ``uniform``: uniform over centered Z_q; ``smudging``:
    uniform on ``[-B_smg, B_smg]``.
    """
    n, q = params.n, params.q
    if kind == "ternary":
        arr = rng.integers(-1, 2, size=n, dtype=np.int64)
    elif kind == "error":
        arr = _discrete_gaussian(n, params.sigma, params.error_bound, rng)
    elif kind == "uniform":
        lo, hi = -(q // 2), q - q // 2
        arr = rng.integers(lo, hi, size=n, dtype=np.int64)
    elif kind == "smudging":
        bsmg = params.smudging_bound
        if 2 * bsmg >= q:
            raise ParameterError("smudging_bound >= q/2 would alias modulo q")
        arr = rng.integers(-bsmg, bsmg + 1, size=n, dtype=np.int64)
    else:
        raise ValueError(f"unknown sample kind {kind!r}; expected one of {SAMPLE_KINDS}")
    return RingElement._raw(arr, params)
