"""Random sketch compressors, error feedback and fixed-point quantization.

The sketch matrix ``Phi`` (``s x d``) has i.i.d. entries that are ``+1`` or
``-1`` with probability ``p_entry`` each and ``0`` otherwise. It is never
transmitted: every party regenerates it from ``(seed, t)``. Rows come from
independent counter-mode streams keyed by ``(seed, t)``, so any row can be
rebuilt on its own.

Two operators are built on it:

* the linear compressor ``F(x) = beta * Phi^T Phi x`` with ``beta = 1/alpha``
  (unbiased) or ``beta = 1/(alpha (r + 1 + 1/alpha))`` (a contraction with
  ``delta = 1/(r + 1 + 1/alpha)``);
* the sign compressor ``F(x) = beta(x) * Phi^T sign(Phi x)`` with
  ``beta(x) = |x|_1 / (d (1 + alpha)(1 + alpha r))``.

Here ``alpha = 2 s p_entry`` is the expected number of nonzeros per column
and ``r = d / s`` the compression ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .errors import ParameterError
from .ring import OPS

RLC_MODES = ("unbiased", "contract")


@dataclass(frozen=True)
class PhiSpec:
    seed: int
    t: int
    s: int
    d: int
    p_entry: float

    def __post_init__(self):
        if not 1 <= self.s <= self.d:
            raise ParameterError(f"need 1 <= s <= d, got s={self.s}, d={self.d}")
        if not 0.0 < self.p_entry <= 0.5:
            raise ParameterError(f"p_entry must lie in (0, 1/2], got {self.p_entry}")
        if self.seed < 0 or self.t < 0:
            raise ParameterError("seed and t must be non-negative")

    @property
    def alpha(self) -> float:
        return 2.0 * self.s * self.p_entry

    @property
    def r(self) -> float:
        return self.d / self.s

    @classmethod
    def from_ratio(cls, seed: int, t: int, d: int, ratio: float, alpha: float) -> "PhiSpec":
        """Sketch of ``s = round(d / ratio)`` rows with the given ``alpha``."""
        s = max(1, int(round(d / ratio)))
        return cls(seed, t, s, d, min(0.5, alpha / (2.0 * s)))

    def at(self, t: int) -> "PhiSpec":
        return PhiSpec(self.seed, t, self.s, self.d, self.p_entry)


@dataclass(frozen=True)
class SparsePhi:
    """COO form of Phi: ``Phi[rows[j], cols[j]] = signs[j]``."""

    rows: np.ndarray
    cols: np.ndarray
    signs: np.ndarray
    s: int
    d: int

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.s, self.d))
        out[self.rows, self.cols] = self.signs
        return out

    def row_hash(self, i: int) -> bytes:
        import hashlib

        m = self.rows == i
        return hashlib.sha256(self.cols[m].astype("<i8").tobytes() + self.signs[m].astype("<i1").tobytes()).digest()


def _stream_key(seed: int, t: int) -> np.ndarray:
    return np.random.SeedSequence([seed, t, 0x706869]).generate_state(2, dtype=np.uint64)


def phi_row(spec: PhiSpec, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Column indices and signs of row ``i`` (sorted by column)."""
    if not 0 <= i < spec.s:
        raise IndexError(f"row {i} outside [0, {spec.s})")
    bitgen = np.random.Philox(key=_stream_key(spec.seed, spec.t), counter=np.array([0, 0, i, 0], dtype=np.uint64))
    rng = np.random.Generator(bitgen)
    # exact i.i.d. Bernoulli(2p) support: binomial count, then a uniform subset
    k = int(rng.binomial(spec.d, 2.0 * spec.p_entry))
    cols = np.sort(rng.choice(spec.d, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    signs = rng.integers(0, 2, size=k, dtype=np.int8) * 2 - 1
    return cols.astype(np.int64), signs.astype(np.int8)


@lru_cache(maxsize=64)
def materialize(spec: PhiSpec) -> SparsePhi:
    rows, cols, signs = [], [], []
    for i in range(spec.s):
        c, g = phi_row(spec, i)
        rows.append(np.full(c.size, i, dtype=np.int64))
        cols.append(c)
        signs.append(g)
    return SparsePhi(
        np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
        np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
        np.concatenate(signs) if signs else np.zeros(0, dtype=np.int8),
        spec.s,
        spec.d,
    )


def _vec(x, size: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (size,):
        raise ParameterError(f"{name} must have shape ({size},), got {v.shape}")
    return v


def phi_apply(spec: PhiSpec, g) -> np.ndarray:
    """``Phi @ g`` using only the nonzeros."""
    g = _vec(g, spec.d, "g")
    phi = materialize(spec)
    OPS.work += phi.nnz
    return np.bincount(phi.rows, weights=phi.signs * g[phi.cols], minlength=spec.s)


def phi_transpose_apply(spec: PhiSpec, u) -> np.ndarray:
    """``Phi.T @ u`` using only the nonzeros."""
    u = _vec(u, spec.s, "u")
    phi = materialize(spec)
    OPS.work += phi.nnz
    return np.bincount(phi.cols, weights=phi.signs * u[phi.rows], minlength=spec.d)


def rlc_beta(spec: PhiSpec, mode: str = "contract") -> float:
    a, r = spec.alpha, spec.r
    if mode == "unbiased":
        return 1.0 / a
    if mode == "contract":
        return 1.0 / (a * (r + 1.0 + 1.0 / a))
    raise ParameterError(f"mode must be one of {RLC_MODES}, got {mode!r}")


def rlc_delta(spec: PhiSpec) -> float:
    return 1.0 / (spec.r + 1.0 + 1.0 / spec.alpha)


def rlc_operator(x, spec: PhiSpec, mode: str = "contract") -> tuple[np.ndarray, float | None]:
    """``(beta Phi^T Phi x, delta)``; ``delta`` is None in unbiased mode."""
    beta = rlc_beta(spec, mode)
    out = beta * phi_transpose_apply(spec, phi_apply(spec, x))
    return out, (rlc_delta(spec) if mode == "contract" else None)


def rlc_decompress(u, spec: PhiSpec, mode: str = "contract") -> np.ndarray:
    """Server side: ``beta Phi^T u`` for an (aggregated) sketch ``u``."""
    return rlc_beta(spec, mode) * phi_transpose_apply(spec, u)


def sign(x: np.ndarray) -> np.ndarray:
    """+1 for x >= 0, -1 otherwise."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def l1_ratio(x) -> float:
    """``|x|_1^2 / (d |x|_2^2)``, in (0, 1]; 0 for the zero vector."""
    x = np.asarray(x, dtype=np.float64)
    sq = float(x @ x)
    return 0.0 if sq == 0 else float(np.abs(x).sum()) ** 2 / (x.size * sq)


def srlc_beta(x, spec: PhiSpec) -> float:
    a, r = spec.alpha, spec.r
    return float(np.abs(np.asarray(x, dtype=np.float64)).sum()) / (spec.d * (1 + a) * (1 + a * r))


def srlc_delta(x, spec: PhiSpec) -> float:
    a, r = spec.alpha, spec.r
    return a * l1_ratio(x) / ((1 + a) * (1 + r * a) ** 2)


def srlc_operator(x, spec: PhiSpec) -> tuple[np.ndarray, float]:
    """``(beta(x) Phi^T sign(Phi x), delta(x))``."""
    x = _vec(x, spec.d, "x")
    beta = srlc_beta(x, spec)
    if beta == 0.0:
        return np.zeros(spec.d), 0.0
    out = beta * phi_transpose_apply(spec, sign(phi_apply(spec, x)))
    return out, srlc_delta(x, spec)


@dataclass(frozen=True)
class CompressedUpdate:
    """What a client sends for one step: an integer sketch or sign bits plus a scale."""

    mode: str
    spec: PhiSpec
    sketch: np.ndarray | None = None
    signs: np.ndarray | None = None
    l1: float = 0.0

    def __post_init__(self):
        if self.mode == "rlc":
            if self.sketch is None or self.sketch.shape != (self.spec.s,):
                raise ParameterError("linear update needs an integer sketch of length s")
        elif self.mode == "srlc":
            if self.signs is None or self.signs.shape != (self.spec.s,):
                raise ParameterError("sign update needs s signs")
            if not np.all(np.abs(self.signs) == 1):
                raise ParameterError("signs must be +1 or -1")
            if not self.l1 >= 0:
                raise ParameterError("l1 scale must be non-negative")
        else:
            raise ParameterError(f"unknown update mode {self.mode!r}")

    def payload(self) -> bytes:
        """Wire form: int64 sketch, or packed sign bits followed by a float64 scale."""
        if self.mode == "rlc":
            return np.asarray(self.sketch, dtype="<i8").tobytes()
        bits = np.packbits(np.asarray(self.signs) > 0, bitorder="little")
        return bits.tobytes() + np.float64(self.l1).tobytes()

    @classmethod
    def from_payload(cls, mode: str, spec: PhiSpec, data: bytes) -> "CompressedUpdate":
        if mode == "rlc":
            if len(data) != 8 * spec.s:
                raise ParameterError("sketch payload has the wrong length")
            return cls(mode, spec, sketch=np.frombuffer(data, dtype="<i8").astype(np.int64))
        nb = -(-spec.s // 8)
        if len(data) != nb + 8:
            raise ParameterError("sign payload has the wrong length")
        bits = np.unpackbits(np.frombuffer(data[:nb], dtype=np.uint8), bitorder="little")[: spec.s]
        l1 = float(np.frombuffer(data[nb:], dtype="<f8")[0])
        return cls(mode, spec, signs=bits.astype(np.int8) * 2 - 1, l1=l1)


def srlc_compress(x, spec: PhiSpec) -> CompressedUpdate:
    x = _vec(x, spec.d, "x")
    return CompressedUpdate("srlc", spec, signs=sign(phi_apply(spec, x)).astype(np.int8), l1=float(np.abs(x).sum()))


def srlc_decompress(update: CompressedUpdate) -> np.ndarray:
    spec = update.spec
    a, r = spec.alpha, spec.r
    beta = update.l1 / (spec.d * (1 + a) * (1 + a * r))
    return beta * phi_transpose_apply(spec, update.signs.astype(np.float64))


# ------------------------------------------------------------ error feedback


@dataclass
class ErrorFeedbackState:
    e: np.ndarray
    gamma: float

    @classmethod
    def zeros(cls, d: int, gamma: float) -> "ErrorFeedbackState":
        return cls(np.zeros(d), gamma)


def ef_step(
    state: ErrorFeedbackState, g, compress: Callable[[np.ndarray], np.ndarray]
) -> tuple[np.ndarray, ErrorFeedbackState]:
    """``p = gamma g + e``; emit ``F(p)``; carry ``p - F(p)``."""
    g = _vec(g, state.e.size, "g")
    p = state.gamma * g + state.e
    fp = np.asarray(compress(p), dtype=np.float64)
    if fp.shape != p.shape:
        raise ParameterError("compressor changed the vector shape")
    return fp, ErrorFeedbackState(p - fp, state.gamma)


# ------------------------------------------------------------ quantization


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(v, scale: float, clip: float) -> np.ndarray:
    """``round(clamp(v, -clip, clip) * scale)``, halves away from zero."""
    if not scale > 0 or not clip > 0:
        raise ParameterError("scale and clip must be positive")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ParameterError("cannot quantize non-finite values")
    return round_half_away(np.clip(v, -clip, clip) * scale).astype(np.int64)


def dequantize(q, scale: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / scale


def quantized_bound(scale: float, clip: float) -> int:
    return int(round_half_away(clip * scale))


def check_quantization_capacity(p: int, n_clients: int, scale: float, clip: float) -> None:
    """The summed quantized values of ``n_clients`` must stay below p/2."""
    if n_clients * quantized_bound(scale, clip) >= p // 2:
        raise ParameterError(
            f"{n_clients} clients * clip {clip} * scale {scale} does not fit below p/2 = {p // 2}"
        )


# ------------------------------------------------------------ Monte-Carlo checks


@dataclass
class MonteCarloCheck:
    name: str
    estimate: float
    bound: float
    stderr: float
    direction: str  # "<=", ">=" or "=="
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: estimate {self.estimate:.6g} {self.direction} {self.bound:.6g} "
            f"(3 SE = {3 * self.stderr:.3g}){' ' + self.detail if self.detail else ''}"
        )


def _one_sided(name, samples, bound, direction, detail="") -> MonteCarloCheck:
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else 0.0
    ok = mean <= bound + 3 * se if direction == "<=" else mean >= bound - 3 * se
    return MonteCarloCheck(name, mean, bound, se, direction, bool(ok), detail)


def monte_carlo_suite(
    d: int, s: int, p_entry: float, samples: int = 10_000, seed: int = 0, x=None
) -> list[MonteCarloCheck]:
    """Sketch and compressor properties estimated over ``samples`` fresh matrices.

    Checks: unbiasedness of ``(1/alpha) Phi^T Phi g`` (per coordinate),
    its second-moment bound ``(r + 1 + 1/alpha)|g|^2``, the l1 lower bound
    ``E|Phi g|_1 >= alpha/(alpha r + 1) |g|_1``, and the contraction
    ``E|F(x) - x|^2 <= (1 - delta)|x|^2`` for both compressors.
    """
    rng = np.random.default_rng([seed, 0x6D63])
    base = PhiSpec(seed, 0, s, d, p_entry)
    a, r = base.alpha, base.r
    g = np.zeros(d)
    g[0] = 1.0
    xr = rng.standard_normal(d) if x is None else _vec(x, d, "x")
    gl1 = rng.standard_normal(d)

    est = np.empty((samples, d))
    sec = np.empty(samples)
    l1 = np.empty(samples)
    rlc_err = np.empty(samples)
    srlc_err = np.empty(samples)
    beta = rlc_beta(base, "contract")
    for i in range(samples):
        spec = base.at(i)
        phi = materialize(spec).dense()
        # the dense copy is only for speed at toy sizes; it equals the sparse operator
        ghat = phi.T @ (phi @ g) / a
        est[i] = ghat
        sec[i] = ghat @ ghat
        l1[i] = np.abs(phi @ gl1).sum()
        fx = beta * (phi.T @ (phi @ xr))
        rlc_err[i] = np.sum((fx - xr) ** 2)
        sx = srlc_beta(xr, spec) * (phi.T @ sign(phi @ xr))
        srlc_err[i] = np.sum((sx - xr) ** 2)
    materialize.cache_clear()

    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(samples)
    z = np.abs(mean - g) / np.where(se > 0, se, np.inf)
    worst = int(np.argmax(z))
    unbiased = MonteCarloCheck(
        "sketch estimator is unbiased",
        float(mean[worst]),
        float(g[worst]),
        float(se[worst]),
        "==",
        bool(np.all(np.abs(mean - g) <= 3 * se + 1e-12)),
        f"worst coordinate {worst}",
    )
    xx = float(xr @ xr)
    delta_s = srlc_delta(xr, base)
    return [
        unbiased,
        _one_sided("sketch second moment", sec, (r + 1 + 1 / a) * float(g @ g), "<="),
        _one_sided("sketch l1 lower bound", l1, a / (a * r + 1) * float(np.abs(gl1).sum()), ">="),
        _one_sided(
            "linear compressor contraction", rlc_err, (1 - rlc_delta(base)) * xx, "<=", f"delta={rlc_delta(base):.6g}"
        ),
        _one_sided("sign compressor contraction", srlc_err, (1 - delta_s) * xx, "<=", f"delta={delta_s:.6g}"),
    ]


# ------------------------------------------------------------ estimators


class _SketchBase(TransformerMixin, BaseEstimator):
    def _fit_spec(self, X):
        X = validate_data(self, X, dtype=np.float64)
        d = X.shape[1]
        if self.sketch_size is not None:
            s = int(self.sketch_size)
        else:
            s = max(1, int(round(d / float(self.ratio))))
        if not 1 <= s <= d:
            raise ValueError(f"sketch size must lie in [1, {d}], got {s}")
        p = self.p_entry if self.p_entry is not None else float(self.alpha) / (2.0 * s)
        self.spec_ = PhiSpec(int(self.seed), int(self.iteration), s, d, float(p))
        self.alpha_ = self.spec_.alpha
        self.ratio_ = self.spec_.r
        return self

    def fit(self, X, y=None):
        return self._fit_spec(X)

    def _check(self, X):
        check_is_fitted(self, "spec_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def sketch(self, X) -> np.ndarray:
        """Row-wise ``Phi x`` (shape ``(n_samples, s)``)."""
        X = self._check(X)
        return np.vstack([phi_apply(self.spec_, x) for x in X]) if len(X) else np.zeros((0, self.spec_.s))


class RandomLinearCompressor(_SketchBase):
    """Linear sketch compressor as a transformer.

    ``transform`` returns ``F(x) = beta Phi^T Phi x`` row by row (same shape as
    the input); ``sketch`` returns ``Phi x``. ``mode='contract'`` uses the
    contraction scaling, ``'unbiased'`` the ``1/alpha`` scaling.
    """

    def __init__(self, ratio=2.0, alpha=1.0, sketch_size=None, p_entry=None, mode="contract", seed=0, iteration=0):
        self.ratio = ratio
        self.alpha = alpha
        self.sketch_size = sketch_size
        self.p_entry = p_entry
        self.mode = mode
        self.seed = seed
        self.iteration = iteration

    def fit(self, X, y=None):
        if self.mode not in RLC_MODES:
            raise ValueError(f"mode must be one of {RLC_MODES}")
        self._fit_spec(X)
        self.beta_ = rlc_beta(self.spec_, self.mode)
        self.delta_ = rlc_delta(self.spec_) if self.mode == "contract" else None
        return self

    def transform(self, X):
        X = self._check(X)
        return np.vstack([rlc_operator(x, self.spec_, self.mode)[0] for x in X]) if len(X) else X.copy()

    def inverse_transform(self, U):
        """Map sketches back to feature space: ``beta Phi^T u``."""
        check_is_fitted(self, "spec_")
        U = check_array(U, dtype=np.float64)
        if U.shape[1] != self.spec_.s:
            raise ValueError(f"expected sketches of width {self.spec_.s}, got {U.shape[1]}")
        return np.vstack([rlc_decompress(u, self.spec_, self.mode) for u in U])


class SignRandomLinearCompressor(_SketchBase):
    """Sign-quantized sketch compressor: ``transform`` returns ``F(x)`` row by row."""

    def __init__(self, ratio=2.0, alpha=1.0, sketch_size=None, p_entry=None, seed=0, iteration=0):
        self.ratio = ratio
        self.alpha = alpha
        self.sketch_size = sketch_size
        self.p_entry = p_entry
        self.seed = seed
        self.iteration = iteration

    def transform(self, X):
        X = self._check(X)
        return np.vstack([srlc_operator(x, self.spec_)[0] for x in X]) if len(X) else X.copy()

    def compress(self, x) -> CompressedUpdate:
        x = self._check(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
        return srlc_compress(x, self.spec_)

    def contraction(self, x) -> float:
        """``delta(x)`` for this sketch, a diagnostic only."""
        check_is_fitted(self, "spec_")
        return srlc_delta(np.asarray(x, dtype=np.float64), self.spec_)
