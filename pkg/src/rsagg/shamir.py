"""(N, k) Shamir sharing of ring elements, coefficient-wise over Z_q."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .ring import RingElement, RingParams, centered, ring_add, sample, scalar_mul


@dataclass(frozen=True)
class EvalPoint:
    x: int
    client_id: int


@dataclass(frozen=True)
class Share:
    point: EvalPoint
    value: RingElement


# A client's aggregated share of the collective key has the same shape.
KeyShare = Share


def default_points(client_ids: Sequence[int]) -> list[EvalPoint]:
    """Points ``x = id + 1``, which are small, distinct and nonzero."""
    return [EvalPoint(int(i) + 1, int(i)) for i in client_ids]


def _check_points(xs: Sequence[int], q: int) -> None:
    seen = set()
    for x in xs:
        r = x % q
        if r == 0:
            raise ParameterError(f"evaluation point {x} is zero mod q")
        if r in seen:
            raise ParameterError(f"duplicate evaluation point {x} mod q")
        seen.add(r)


def evaluate_at(secret: RingElement, blinders: Sequence[RingElement], x: int) -> RingElement:
    """Horner evaluation of ``secret + sum_l t_l x^l`` at a scalar point."""
    acc = None
    for t in reversed(blinders):
        acc = t if acc is None else ring_add(scalar_mul(acc, x), t)
    if acc is None:
        return secret
    return ring_add(scalar_mul(acc, x), secret)


def make_shares(
    secret: RingElement,
    k: int,
    points: Sequence[EvalPoint],
    rng: np.random.Generator,
    *,
    blinders: Sequence[RingElement] | None = None,
) -> list[Share]:
    """Share ``secret`` so that any ``k`` of the returned shares recover it.

    ``blinders`` (the k-1 uniform polynomials) may be passed in for tests.
    """
    params = secret.params
    if not 1 <= k <= len(points):
        raise ParameterError(f"need 1 <= k <= N, got k={k}, N={len(points)}")
    _check_points([p.x for p in points], params.q)
    if blinders is None:
        blinders = [sample("uniform", params, rng) for _ in range(k - 1)]
    elif len(blinders) != k - 1:
        raise ParameterError(f"expected {k - 1} blinding polynomials, got {len(blinders)}")
    return [Share(pt, evaluate_at(secret, blinders, pt.x)) for pt in points]


@lru_cache(maxsize=1024)
def _basis_coeffs(xs: tuple[int, ...], q: int) -> tuple[tuple[int, ...], ...]:
    """Row l, column i: degree-l coefficient of the Lagrange basis polynomial L_i."""
    k = len(xs)
    rows = [[0] * k for _ in range(k)]
    for i, xi in enumerate(xs):
        # expand prod_{j != i} (X - x_j), lowest degree first
        poly = [1]
        denom = 1
        for j, xj in enumerate(xs):
            if j == i:
                continue
            nxt = [0] * (len(poly) + 1)
            for d, c in enumerate(poly):
                nxt[d] = (nxt[d] - c * xj) % q
                nxt[d + 1] = (nxt[d + 1] + c) % q
            poly = nxt
            denom = denom * (xi - xj) % q
        inv = pow(denom, -1, q)
        for d, c in enumerate(poly):
            rows[d][i] = centered(c * inv, q)
    return tuple(tuple(r) for r in rows)


def _xs(points: Sequence[EvalPoint], k: int, q: int) -> tuple[int, ...]:
    if len(points) != k:
        raise ParameterError(f"need exactly k={k} points, got {len(points)}")
    xs = tuple(p.x % q for p in points)
    _check_points(xs, q)
    return xs


def lagrange_at_zero(points: Sequence[EvalPoint], k: int, q: int) -> list[int]:
    """Coefficients ``r_i`` with ``s = sum_i r_i * share_i`` (centered mod q)."""
    return list(_basis_coeffs(_xs(points, k, q), q)[0])


def coeff_recon_coeffs(points: Sequence[EvalPoint], k: int, q: int) -> list[list[int]]:
    """k x k matrix: row l recovers the degree-l coefficient of the sharing polynomial.

    Row 0 equals :func:`lagrange_at_zero`. This is the inverse Vandermonde
    matrix of the points, transposed so that ``t_l = sum_i M[l][i] * share_i``.
    """
    return [list(r) for r in _basis_coeffs(_xs(points, k, q), q)]


def basis_value(points: Sequence[EvalPoint], k: int, q: int, index: int, x: int) -> int:
    """``L_index(x)`` for the Lagrange basis over ``points``."""
    rows = coeff_recon_coeffs(points, k, q)
    acc = 0
    for l in reversed(range(k)):
        acc = (acc * x + rows[l][index]) % q
    return centered(acc, q)


def reconstruct(shares: Sequence[Share], k: int) -> RingElement:
    if not shares:
        raise ParameterError("no shares given")
    q = shares[0].value.params.q
    coeffs = lagrange_at_zero([s.point for s in shares], k, q)
    acc = RingElement.zero(shares[0].value.params)
    for sh, r in zip(shares, coeffs):
        acc = ring_add(acc, scalar_mul(sh.value, r))
    return acc


def reconstruct_polynomial(shares: Sequence[Share], k: int) -> list[RingElement]:
    """Recover ``(s, t_1, ..., t_{k-1})`` from k shares."""
    if not shares:
        raise ParameterError("no shares given")
    params = shares[0].value.params
    rows = coeff_recon_coeffs([s.point for s in shares], k, params.q)
    out = []
    for row in rows:
        acc = RingElement.zero(params)
        for sh, r in zip(shares, row):
            acc = ring_add(acc, scalar_mul(sh.value, r))
        out.append(acc)
    return out


def scalar_params(q: int, p: int = 2) -> RingParams:
    """n=1 parameters for sharing plain field elements (hand examples, tests)."""
    return RingParams(n=1, q=q, p=p, sigma=0.0, error_bound=0)
