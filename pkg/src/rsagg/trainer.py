"""Federated logistic regression over the secure aggregation protocol.

Each round, every online client computes a full-batch gradient at the
current model, folds it into its error-feedback memory, sketches the result
with the round's shared matrix, quantizes the sketch to integers and uploads
it encrypted. The server only ever sees the decrypted integer sum. It turns
that sum back into a model-space step, applies it, and ships the new
weights to the clients inside the round result.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .bfv import validate_params
from .compression import (
    RLC_MODES,
    PhiSpec,
    check_quantization_capacity,
    dequantize,
    phi_apply,
    phi_transpose_apply,
    quantize,
    rlc_beta,
)
from .errors import ParameterError
from .protocol.messages import RoundStatus
from .protocol.runner import Availability, RunConfig, run_simulation
from .ring import OPS, RingParams

log = logging.getLogger(__name__)

COMPRESSORS = ("rlc", "none")
QUANTIZE_ORDERS = ("sketch_first", "quantize_first")


# ------------------------------------------------------------ data and loss


@dataclass
class Dataset:
    """Per-client shards (equal sizes) with labels in {-1, +1}."""

    X: list[np.ndarray]
    y: list[np.ndarray]

    def __post_init__(self):
        if not self.X or len(self.X) != len(self.y):
            raise ParameterError("need one label vector per client shard")
        sizes = {x.shape[0] for x in self.X}
        if len(sizes) != 1 or 0 in sizes:
            raise ParameterError(f"client shards must be nonempty and equal in size, got {sorted(sizes)}")
        for yi in self.y:
            if not np.all(np.abs(yi) == 1):
                raise ParameterError("labels must be -1 or +1")

    @property
    def n_clients(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X[0].shape[1]

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.X), np.concatenate(self.y)


def two_gaussians(
    n_samples: int, dim: int, *, separation: float = 3.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Labels +-1 with equal probability; ``x ~ N(y mu, I)`` and ``|mu| = separation``.

    ``mu`` is spread over the first ``min(dim, 50)`` coordinates.
    """
    rng = np.random.default_rng([seed, 0x6461])
    mu = np.zeros(dim)
    m = min(dim, 50)
    mu[:m] = separation / np.sqrt(m)
    y = rng.choice(np.array([-1.0, 1.0]), size=n_samples)
    X = y[:, None] * mu + rng.standard_normal((n_samples, dim))
    return X, y


def split_clients(X: np.ndarray, y: np.ndarray, n_clients: int) -> Dataset:
    """Equal contiguous shards; a remainder of fewer than ``n_clients`` rows is dropped."""
    per = X.shape[0] // n_clients
    if per == 0:
        raise ParameterError(f"{X.shape[0]} samples cannot feed {n_clients} clients")
    return Dataset([X[i * per : (i + 1) * per] for i in range(n_clients)], [y[i * per : (i + 1) * per] for i in range(n_clients)])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, -y * (X @ w))))


def local_gradient(w, X, y) -> np.ndarray:
    """Exact gradient of the mean logistic loss ``log(1 + exp(-y x.w))``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("local dataset is empty")
    if y.shape != (X.shape[0],) or np.shape(w) != (X.shape[1],):
        raise ParameterError("shapes of w, X and y do not agree")
    OPS.work += 2 * X.size
    return -(X.T @ (y * _sigmoid(-y * (X @ w)))) / X.shape[0]


def accuracy(w, X, y) -> float:
    return float(np.mean(np.where(X @ w >= 0, 1.0, -1.0) == y))


# ------------------------------------------------------------ configuration


@dataclass
class TrainConfig:
    n_clients: int = 8
    threshold: int = 4
    rounds: int = 300
    dropout: float = 0.5
    gamma: float = 0.1
    ratio: float = 1.0
    alpha: float = 0.1
    compressor: str = "rlc"
    mode: str = "contract"
    error_feedback: bool = True
    scale: float = 1e3
    clip: float = 1e3
    seed: int = 0
    ring_n: int = 128
    plaintext_modulus: int = 2**24
    smudging_bound: int = 2**30
    clock: str = "simulated"
    halt_on_abort: bool = False
    max_aborts: int | None = None
    quantize_order: str = "sketch_first"

    def __post_init__(self):
        if self.compressor not in COMPRESSORS:
            raise ParameterError(f"compressor must be one of {COMPRESSORS}")
        if self.quantize_order not in QUANTIZE_ORDERS:
            raise ParameterError(f"quantize_order must be one of {QUANTIZE_ORDERS}")
        if self.mode not in RLC_MODES:
            raise ParameterError(f"mode must be one of {RLC_MODES}")
        if not self.gamma > 0:
            raise ParameterError("step size must be positive")
        if not self.ratio >= 1:
            raise ParameterError("compression ratio must be at least 1")
        if not self.alpha > 0:
            raise ParameterError("alpha must be positive")
        if not 0 <= self.dropout < 1:
            raise ParameterError("dropout must lie in [0, 1)")

    def ring_params(self) -> RingParams:
        return RingParams.production(n=self.ring_n).replace(
            p=self.plaintext_modulus, smudging_bound=self.smudging_bound
        )

    def phi_spec(self, dim: int, t: int) -> PhiSpec | None:
        if self.compressor == "none":
            return None
        return PhiSpec.from_ratio(self.seed, t, dim, self.ratio, self.alpha)

    def check(self) -> None:
        """Parameter validation; raises ParameterError with the report text."""
        params = self.ring_params()
        report = validate_params(params, self.n_clients, self.threshold)
        if not report.ok:
            raise ParameterError("; ".join(report.violations))
        check_quantization_capacity(params.p, self.n_clients, self.scale, self.clip)


# ------------------------------------------------------------ client and server logic


@dataclass
class _Pending:
    p: np.ndarray
    fp: np.ndarray


@dataclass
class RoundMetrics:
    round: int
    status: str
    contributors: int
    loss: float
    acc: float
    exact: bool | None
    agg_error: float | None
    bytes_up: int = 0
    bytes_down: int = 0
    t_encrypt_ms: float = 0.0
    t_decrypt_ms: float = 0.0
    t_compress_ms: float = 0.0
    round_ms: float = 0.0


CSV_FIELDS = ("round", "loss", "acc", "bytes_up", "bytes_down", "t_encrypt_ms", "t_decrypt_ms", "t_compress_ms")


@dataclass
class TrainResult:
    config: TrainConfig
    weights: np.ndarray
    history: list[RoundMetrics]
    run: object = field(repr=False, default=None)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].acc if self.history else float("nan")

    @property
    def aborted(self) -> int:
        return sum(h.status != "ok" for h in self.history)

    @property
    def all_exact(self) -> bool:
        return all(h.exact is not False for h in self.history)

    def mean_round_ms(self) -> float:
        return float(np.mean([h.round_ms for h in self.history])) if self.history else 0.0

    def to_csv(self) -> str:
        lines = [",".join(CSV_FIELDS)]
        for h in self.history:
            lines.append(
                f"{h.round},{h.loss:.6f},{h.acc:.4f},{h.bytes_up},{h.bytes_down},"
                f"{h.t_encrypt_ms:.3f},{h.t_decrypt_ms:.3f},{h.t_compress_ms:.3f}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "rounds": len(self.history),
            "aborted": self.aborted,
            "all_exact": self.all_exact,
            "final_loss": self.history[-1].loss if self.history else None,
            "final_accuracy": self.final_accuracy,
            "mean_round_ms": self.mean_round_ms(),
            "bytes_up": sum(h.bytes_up for h in self.history),
            "bytes_down": sum(h.bytes_down for h in self.history),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _encode_model(w: np.ndarray) -> bytes:
    return np.asarray(w, dtype="<f8").tobytes()


def _decode_model(data: bytes, dim: int) -> np.ndarray:
    if not data:
        return np.zeros(dim)
    w = np.frombuffer(data, dtype="<f8")
    if w.shape != (dim,):
        raise ParameterError("model payload has the wrong length")
    return w.copy()


class _Trainer:
    def __init__(self, cfg: TrainConfig, data: Dataset, test: tuple[np.ndarray, np.ndarray] | None):
        self.cfg = cfg
        self.data = data
        self.d = data.dim
        self.test = test if test is not None else data.pooled()
        self.train_xy = data.pooled()
        self.w = np.zeros(self.d)
        self.e = {c: np.zeros(self.d) for c in range(cfg.n_clients)}
        self.pending: dict[tuple[int, int], _Pending] = {}
        self.sent: dict[tuple[int, int], np.ndarray] = {}
        self.sketch_float: dict[tuple[int, int], np.ndarray] = {}
        self.compress_ms: dict[int, float] = {}
        self.history: list[RoundMetrics] = []
        self.clock = None

    def width(self, t: int) -> int:
        spec = self.cfg.phi_spec(self.d, t)
        return self.d if spec is None else spec.s

    def beta(self, spec: PhiSpec) -> float:
        return rlc_beta(spec, self.cfg.mode)

    # client side: runs inside the client's upload step
    def client_input(self, cid: int, t: int, context: bytes) -> np.ndarray:
        cfg = self.cfg
        w = _decode_model(context, self.d)
        g = local_gradient(w, self.data.X[cid], self.data.y[cid])
        with self.clock.timer() as el:
            p = cfg.gamma * g + (self.e[cid] if cfg.error_feedback else 0.0)
            spec = cfg.phi_spec(self.d, t)
            u = p if spec is None else phi_apply(spec, p)
            if spec is not None and cfg.quantize_order == "quantize_first":
                # integer inputs through a +-1 matrix stay integers, so sums stay exact
                q = np.rint(phi_apply(spec, quantize(p, cfg.scale, cfg.clip))).astype(np.int64)
                limit = (cfg.ring_params().p // 2 - 1) // cfg.n_clients
                if q.size and int(np.abs(q).max()) > limit:
                    raise ParameterError(f"sketched integers reach {int(np.abs(q).max())}, above the capacity {limit}")
            else:
                q = quantize(u, cfg.scale, cfg.clip)
            uq = dequantize(q, cfg.scale)
            fp = uq if spec is None else self.beta(spec) * phi_transpose_apply(spec, uq)
        self.compress_ms[t] = self.compress_ms.get(t, 0.0) + el.ms
        self.pending[(cid, t)] = _Pending(p, fp)
        self.sent[(cid, t)] = q
        self.sketch_float[(cid, t)] = u
        return q

    def client_result(self, cid: int, t: int, res) -> None:
        pend = self.pending.pop((cid, t), None)
        if pend is None or not self.cfg.error_feedback:
            return
        # applied: carry the compression residual; aborted: nothing was applied
        self.e[cid] = pend.p - pend.fp if res.status == RoundStatus.OK else pend.p

    # server side: runs before the round result is sent
    def server_round(self, rec) -> bytes:
        cfg = self.cfg
        t = rec.round
        exact = agg_error = None
        if rec.ok:
            contributors = rec.contributors
            total = np.asarray(rec.result, dtype=np.int64)
            plain = sum(self.sent[(c, t)] for c in contributors)
            exact = bool(np.array_equal(total, plain))
            agg_error = float(np.max(np.abs(dequantize(total, cfg.scale) - sum(self.sketch_float[(c, t)] for c in contributors))))
            spec = cfg.phi_spec(self.d, t)
            agg = dequantize(total, cfg.scale)
            step = agg if spec is None else self.beta(spec) * phi_transpose_apply(spec, agg)
            self.w = self.w - step / len(contributors)
            if not np.all(np.isfinite(self.w)):
                raise ParameterError("model diverged")
        for key in [k for k in self.sent if k[1] == t]:
            del self.sent[key]
            del self.sketch_float[key]
        X, y = self.test
        Xtr, ytr = self.train_xy
        self.history.append(
            RoundMetrics(
                round=t,
                status="ok" if rec.ok else "aborted",
                contributors=len(rec.contributors) if rec.uploads else 0,
                loss=logistic_loss(self.w, Xtr, ytr),
                acc=accuracy(self.w, X, y),
                exact=exact,
                agg_error=agg_error,
            )
        )
        aborted = sum(h.status != "ok" for h in self.history)
        if not rec.ok and cfg.halt_on_abort:
            raise TrainingHalted(t, rec.aborted or "")
        if cfg.max_aborts is not None and aborted > cfg.max_aborts:
            raise TrainingHalted(t, f"{aborted} aborted rounds exceed the limit of {cfg.max_aborts}")
        return _encode_model(self.w)


class TrainingHalted(RuntimeError):
    def __init__(self, round_index: int, reason: str):
        super().__init__(f"training halted at round {round_index}: {reason}")
        self.round_index = round_index
        self.reason = reason


def train_loop(
    config: TrainConfig,
    data: Dataset | None = None,
    *,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    samples_per_client: int = 250,
    dim: int = 1000,
) -> TrainResult:
    """Run ``config.rounds`` rounds of secure federated training.

    Without ``data`` a two-Gaussian task is generated from the seed, with a
    held-out test set of the same size.
    """
    config.check()
    if data is None:
        n = samples_per_client * config.n_clients
        X, y = two_gaussians(2 * n, dim, seed=config.seed)
        data = split_clients(X[:n], y[:n], config.n_clients)
        test = (X[n:], y[n:]) if test is None else test
    if data.n_clients != config.n_clients:
        raise ParameterError(f"dataset has {data.n_clients} shards, config expects {config.n_clients}")
    tr = _Trainer(config, data, test)
    from .timing import Clock

    tr.clock = Clock(config.clock, config.ring_n)
    params = config.ring_params()
    width = tr.width(0)
    run_cfg = RunConfig(
        config.n_clients,
        config.threshold,
        config.rounds,
        width,
        params,
        seed=config.seed,
        clock=config.clock,
        availability=Availability(rate=config.dropout, seed=config.seed),
        input_fn=tr.client_input,
    )
    run = run_simulation(run_cfg, on_round_complete=tr.server_round, on_result=tr.client_result)
    for h, r in zip(tr.history, run.rounds):
        h.bytes_up, h.bytes_down = r.bytes_up, r.bytes_down
        h.t_encrypt_ms, h.t_decrypt_ms = r.encrypt_ms, r.decrypt_ms
        h.t_compress_ms = tr.compress_ms.get(h.round, 0.0)
        h.round_ms = r.round_ms
    return TrainResult(config, tr.w, tr.history, run)


def plain_fedsgd(
    data: Dataset, rounds: int, gamma: float, *, participants=None
) -> list[np.ndarray]:
    """Reference trajectory without encryption, sketching or quantization.

    ``participants(t)`` returns the ids averaged in round ``t`` (all by default).
    """
    w = np.zeros(data.dim)
    out = []
    for t in range(rounds):
        ids = range(data.n_clients) if participants is None else participants(t)
        ids = list(ids)
        if ids:
            g = sum(local_gradient(w, data.X[c], data.y[c]) for c in ids) / len(ids)
            w = w - gamma * g
        out.append(w.copy())
    return out


# ------------------------------------------------------------ estimator


class SecureFederatedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary logistic regression trained through the secure aggregation protocol.

    ``fit`` splits the rows into ``n_clients`` equal shards in order (a
    remainder is dropped) and runs the federated loop in the simulator.
    """

    def __init__(
        self,
        n_clients=8,
        threshold=4,
        rounds=300,
        dropout=0.5,
        gamma=0.1,
        ratio=1.0,
        alpha=0.1,
        compressor="rlc",
        scale=1e3,
        clip=1e3,
        ring_n=128,
        seed=0,
    ):
        self.n_clients = n_clients
        self.threshold = threshold
        self.rounds = rounds
        self.dropout = dropout
        self.gamma = gamma
        self.ratio = ratio
        self.alpha = alpha
        self.compressor = compressor
        self.scale = scale
        self.clip = clip
        self.ring_n = ring_n
        self.seed = seed

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError(f"only binary targets are supported, got {self.classes_.size} classes")
        signed = np.where(y == self.classes_[1], 1.0, -1.0)
        data = split_clients(X, signed, int(self.n_clients))
        cfg = TrainConfig(
            n_clients=int(self.n_clients),
            threshold=int(self.threshold),
            rounds=int(self.rounds),
            dropout=float(self.dropout),
            gamma=float(self.gamma),
            ratio=float(self.ratio),
            alpha=float(self.alpha),
            compressor=self.compressor,
            scale=float(self.scale),
            clip=float(self.clip),
            ring_n=int(self.ring_n),
            seed=int(self.seed),
        )
        res = train_loop(cfg, data, test=data.pooled())
        self.coef_ = res.weights.reshape(1, -1)
        self.intercept_ = np.zeros(1)
        self.history_ = res.history
        self.n_iter_ = len(res.history)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return X @ self.coef_[0]

    def predict_proba(self, X):
        p1 = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) >= 0).astype(int)]
