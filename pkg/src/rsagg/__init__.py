"""Dropout-tolerant secure aggregation with threshold BFV and sketch compression."""

from .bfv import (
    Ciphertext,
    ParamReport,
    PublicKey,
    SecretKey,
    decrypt,
    encrypt,
    keygen_public,
    keygen_secret,
    validate_params,
)
from .compression import (
    CompressedUpdate,
    ErrorFeedbackState,
    PhiSpec,
    RandomLinearCompressor,
    SignRandomLinearCompressor,
    dequantize,
    ef_step,
    phi_apply,
    phi_transpose_apply,
    quantize,
    rlc_operator,
    srlc_operator,
)
from .errors import FramingError, ParameterError, ProtocolError, RoundAborted, SecureChannelError
from .protocol.runner import Availability, RunConfig, RunResult, run_asa_baseline, run_simulation, run_tcp_local
from .ring import RingElement, RingParams
from .shamir import make_shares, reconstruct
from .trainer import SecureFederatedLogisticRegression, TrainConfig, train_loop
from .transport.wire import Envelope, MsgType

__version__ = "0.1.0"

__all__ = [
    "Availability",
    "Ciphertext",
    "CompressedUpdate",
    "Envelope",
    "ErrorFeedbackState",
    "FramingError",
    "MsgType",
    "ParamReport",
    "ParameterError",
    "PhiSpec",
    "ProtocolError",
    "PublicKey",
    "RandomLinearCompressor",
    "RingElement",
    "RingParams",
    "RoundAborted",
    "RunConfig",
    "RunResult",
    "SecretKey",
    "SecureChannelError",
    "SecureFederatedLogisticRegression",
    "SignRandomLinearCompressor",
    "TrainConfig",
    "decrypt",
    "dequantize",
    "ef_step",
    "encrypt",
    "keygen_public",
    "keygen_secret",
    "make_shares",
    "phi_apply",
    "phi_transpose_apply",
    "quantize",
    "reconstruct",
    "rlc_operator",
    "run_asa_baseline",
    "run_simulation",
    "run_tcp_local",
    "srlc_operator",
    "train_loop",
    "validate_params",
]
