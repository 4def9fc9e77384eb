"""Pure protocol steps, independent of messaging.

The node state machines in :mod:`rsagg.protocol.nodes` call these; tests
call them directly. No function here ever forms the collective secret key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..bfv import (
    Ciphertext,
    PublicKey,
    SecretKey,
    ct_add,
    decode,
    encode,
    encrypt,
    keygen_public,
    keygen_secret,
    scale_and_round,
)
from ..errors import ParameterError, ProtocolError, RoundAborted
from ..ring import RingElement, RingParams, ring_add, ring_mul, ring_sum, sample, scalar_mul
from ..shamir import EvalPoint, KeyShare, Share, coeff_recon_coeffs, lagrange_at_zero, make_shares


@dataclass
class ClientSetup:
    """What one client produces during key setup."""

    client_id: int
    secret: SecretKey
    pk_share: RingElement
    shares: dict[int, Share]  # recipient client id -> share of this client's secret


def client_setup(
    params: RingParams,
    n_clients: int,
    k: int,
    p1: RingElement | None,
    points: Sequence[EvalPoint] | None,
    client_id: int,
    rng: np.random.Generator,
) -> ClientSetup:
    """Sample a local secret, share it k-of-N and derive the public-key share."""
    if p1 is None or not points:
        raise ProtocolError("setup needs the common polynomial and the evaluation points")
    if len(points) != n_clients:
        raise ProtocolError(f"expected {n_clients} evaluation points, got {len(points)}")
    sk = keygen_secret(params, rng)
    shares = make_shares(sk.s, k, points, rng)
    pk = keygen_public(sk, p1, params, rng)
    return ClientSetup(client_id, sk, pk.p0, {sh.point.client_id: sh for sh in shares})


def aggregate_key_share(incoming: Sequence[Share], point: EvalPoint, n_clients: int) -> KeyShare:
    """``s'_i``: sum of the shares every client sent to this one (its own included)."""
    if len(incoming) != n_clients:
        raise ProtocolError(f"have {len(incoming)} of {n_clients} incoming shares")
    return KeyShare(point, ring_sum(sh.value for sh in incoming))


def server_setup_aggregate(
    p0_shares: Mapping[int, RingElement] | Sequence[RingElement],
    p1: RingElement,
    expected: Sequence[int] | None = None,
) -> PublicKey:
    """Collective public key ``(sum p0_i, p1)``; refuses a partial setup."""
    if isinstance(p0_shares, Mapping):
        if expected is not None:
            missing = sorted(set(expected) - set(p0_shares))
            if missing:
                raise ProtocolError(f"setup aborted: no public-key share from clients {missing}")
        values = [p0_shares[c] for c in sorted(p0_shares)]
    else:
        values = list(p0_shares)
        if expected is not None and len(values) != len(expected):
            raise ProtocolError("setup aborted: public-key share count mismatch")
    if not values:
        raise ProtocolError("setup aborted: no public-key shares")
    return PublicKey(ring_sum(values), p1)


def client_encrypt_input(
    g: Sequence[int], cpk: PublicKey, params: RingParams, rng: np.random.Generator
) -> list[Ciphertext]:
    return [encrypt(cpk, m, params, rng, chunk_index=j) for j, m in enumerate(encode(g, params))]


def server_aggregate_ciphertexts(cts: Mapping[int, Sequence[Ciphertext]]) -> list[Ciphertext]:
    """Chunk-wise sum over contributors, in client-id order."""
    if not cts:
        raise ProtocolError("no contributors to aggregate")
    ids = sorted(cts)
    width = len(cts[ids[0]])
    for c in ids:
        if len(cts[c]) != width:
            raise ProtocolError(f"client {c} sent {len(cts[c])} chunks, expected {width}")
    agg = list(cts[ids[0]])
    for c in ids[1:]:
        agg = [ct_add(a, b) for a, b in zip(agg, cts[c])]
    return agg


@dataclass(frozen=True)
class Selection:
    selected: tuple[int, ...]
    coeffs: dict[int, int]


def server_select_and_coeffs(
    round_index: int,
    available: Sequence[int],
    points: Mapping[int, EvalPoint],
    k: int,
    q: int,
) -> Selection:
    """Pick the k lowest available ids that hold a key share; abort if fewer."""
    eligible = sorted(c for c in set(available) if c in points)
    if len(eligible) < k:
        raise RoundAborted(round_index, f"only {len(eligible)} of the required {k} decryptors available")
    chosen = tuple(eligible[:k])
    r = lagrange_at_zero([points[c] for c in chosen], k, q)
    return Selection(chosen, dict(zip(chosen, r)))


def client_decryption_share(
    agg_c1: Sequence[RingElement],
    r: int,
    key_share: RingElement,
    params: RingParams,
    rng: np.random.Generator,
) -> list[RingElement]:
    """Per chunk ``r*s'*c1 + e``, with fresh smudging noise ``e`` for every chunk."""
    rs = scalar_mul(key_share, r)
    out = []
    for c1 in agg_c1:
        e = sample("smudging", params, rng)
        out.append(ring_add(ring_mul(rs, c1), e))
    return out


def combine_shares(
    c0: Sequence[RingElement], shares: Mapping[int, Sequence[RingElement]], selected: Sequence[int]
) -> list[RingElement]:
    """``c0 + sum_i h_i`` per chunk (the noisy scaled plaintext)."""
    out = []
    for j, c in enumerate(c0):
        acc = c
        for a in selected:
            acc = ring_add(acc, shares[a][j])
        out.append(acc)
    return out


def server_finalize_round(
    round_index: int,
    c0: Sequence[RingElement],
    shares: Mapping[int, Sequence[RingElement]],
    selected: Sequence[int],
    dim: int,
    params: RingParams,
) -> np.ndarray:
    missing = [a for a in selected if a not in shares]
    if missing:
        raise RoundAborted(round_index, f"missing decryption shares from {missing}")
    for a in selected:
        if len(shares[a]) != len(c0):
            raise RoundAborted(round_index, f"client {a} sent {len(shares[a])} shares for {len(c0)} chunks")
    combined = combine_shares(c0, shares, selected)
    return decode([scale_and_round(v.coeffs, params) for v in combined], dim, params)


def helper_aux_share(
    key_share: RingElement,
    column: Sequence[int],
    x_new: int,
    *,
    existing_points: Sequence[int] = (),
) -> RingElement:
    """Evaluate ``s'_a * (r_a + sum_l r_{a,l} x^l)`` at ``x_new``.

    ``column`` is this helper's column of the reconstruction matrix, lowest
    degree first. The sum of all helpers' values is the sharing polynomial
    evaluated at ``x_new``.
    """
    q = key_share.params.q
    if x_new % q == 0:
        raise ProtocolError("new evaluation point must be nonzero")
    if any((x_new - x) % q == 0 for x in existing_points):
        raise ProtocolError(f"evaluation point {x_new} collides with an existing client")
    scalar = 0
    for c in reversed(column):
        scalar = (scalar * x_new + c) % q
    return scalar_mul(key_share, scalar)


def helper_columns(points: Sequence[EvalPoint], k: int, q: int) -> dict[int, list[int]]:
    """Reconstruction-matrix column for each helper, keyed by client id."""
    rows = coeff_recon_coeffs(points, k, q)
    return {pt.client_id: [rows[l][i] for l in range(k)] for i, pt in enumerate(points)}


def newuser_assemble(aux: Sequence[RingElement], x_new: int, k: int, client_id: int) -> KeyShare:
    if len(aux) != k:
        raise ProtocolError(f"need exactly {k} auxiliary shares, got {len(aux)}")
    return KeyShare(EvalPoint(x_new, client_id), ring_sum(aux))


def residual_noise(
    combined: Sequence[RingElement], aggregate: np.ndarray, params: RingParams
) -> int:
    """inf-norm of ``c0 + sum h - delta*m`` over all chunks (server-computable)."""
    worst = 0
    for j, v in enumerate(combined):
        m = np.zeros(params.n, dtype=np.int64)
        part = aggregate[j * params.n : (j + 1) * params.n]
        m[: part.size] = part
        e = v - RingElement(params.delta * m, params)
        worst = max(worst, e.inf_norm())
    return worst


@dataclass
class RoundRecord:
    """Server-side state of one aggregation round."""

    round: int
    uploads: dict[int, list[Ciphertext]] = field(default_factory=dict)
    aggregate: list[Ciphertext] | None = None
    selection: Selection | None = None
    shares: dict[int, list[RingElement]] = field(default_factory=dict)
    result: np.ndarray | None = None
    aborted: str | None = None
    noise: int | None = None
    noise_bound: int | None = None
    late_discarded: int = 0

    @property
    def contributors(self) -> tuple[int, ...]:
        return tuple(sorted(self.uploads))

    @property
    def ok(self) -> bool:
        return self.result is not None and self.aborted is None
