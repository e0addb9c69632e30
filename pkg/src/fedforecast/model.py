"""Forecast models over flat parameter vectors.

Two model kinds, both mapping an input row of d floats to h horizon steps:

* ``linear``: y = W x + b
* ``mlp``:    y = W2 tanh(W1 x + b1) + b2   (one hidden layer, tanh)

Parameters live in one flat float64 vector so federated averaging, clipping,
and noising are plain vector arithmetic. Layout is fixed and documented:

* linear: W (h x d, row-major), then b (h)
* mlp:    W1 (m x d), b1 (m), W2 (h x m), b2 (h)

The loss is the mean squared error over samples AND horizon steps, so client
sample counts are the only scale carrier in federated weighting. Gradients
are analytic, exact, and match the layout above.

Vectors serialize to a little-endian binary blob: a 16-byte header
(kind code, input_dim, hidden_dim, horizon as uint32) followed by the raw
float64 values. The communication meter counts exactly these blob sizes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericError, ShapeError
from .seeds import rng_for

KINDS = ("linear", "mlp")

# struct '<IIII': kind code, input_dim, hidden_dim, horizon
PARAM_HEADER = struct.Struct("<IIII")
PARAM_HEADER_BYTES = PARAM_HEADER.size


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; hidden_dim is ignored for linear models."""

    kind: str
    input_dim: int
    horizon: int = 1
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ConfigError(f"model input_dim must be >= 1, got {self.input_dim}")
        if self.horizon < 1:
            raise ConfigError(f"model horizon must be >= 1, got {self.horizon}")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigError(f"mlp hidden_dim must be >= 1, got {self.hidden_dim}")

    @property
    def param_count(self) -> int:
        d, h, m = self.input_dim, self.horizon, self.hidden_dim
        if self.kind == "linear":
            return h * d + h
        return m * d + m + h * m + h


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A spec plus its flat float64 parameter vector. Treated as immutable."""

    spec: ModelSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.spec.param_count:
            raise ShapeError(
                f"parameter vector has length {values.shape}, "
                f"spec requires {self.spec.param_count}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite values")
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(self.spec, values)


def _unflatten(spec: ModelSpec, values: np.ndarray):
    """Views of the flat vector as weight matrices/bias vectors (no copy)."""
    d, h, m = spec.input_dim, spec.horizon, spec.hidden_dim
    if spec.kind == "linear":
        w = values[: h * d].reshape(h, d)
        b = values[h * d :]
        return w, b
    o = 0
    w1 = values[o : o + m * d].reshape(m, d)
    o += m * d
    b1 = values[o : o + m]
    o += m
    w2 = values[o : o + h * m].reshape(h, m)
    o += h * m
    b2 = values[o:]
    return w1, b1, w2, b2


def _flatten(spec: ModelSpec, *parts: np.ndarray) -> np.ndarray:
    flat = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
    if flat.shape[0] != spec.param_count:
        raise ShapeError(f"flattened length {flat.shape[0]} != spec count {spec.param_count}")
    return flat


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights (s = sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = rng_for(seed, "glorot", spec.kind)
    d, h, m = spec.input_dim, spec.horizon, spec.hidden_dim
    if spec.kind == "linear":
        s = np.sqrt(6.0 / (d + h))
        w = rng.uniform(-s, s, size=(h, d))
        return ModelParams(spec, _flatten(spec, w, np.zeros(h)))
    s1 = np.sqrt(6.0 / (d + m))
    s2 = np.sqrt(6.0 / (m + h))
    w1 = rng.uniform(-s1, s1, size=(m, d))
    w2 = rng.uniform(-s2, s2, size=(h, m))
    return ModelParams(spec, _flatten(spec, w1, np.zeros(m), w2, np.zeros(h)))


def _check_input_matrix(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected (*, {spec.input_dim})")
    return x


def predict_batch(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Predictions for an n x d input matrix; returns n x h."""
    x = _check_input_matrix(params.spec, inputs)
    if params.spec.kind == "linear":
        w, b = _unflatten(params.spec, params.values)
        return x @ w.T + b
    w1, b1, w2, b2 = _unflatten(params.spec, params.values)
    return np.tanh(x @ w1.T + b1) @ w2.T + b2


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Prediction for a single input row; returns h floats."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected ({params.spec.input_dim},)")
    return predict_batch(params, x[None, :])[0]


def _check_batch(spec: ModelSpec, inputs: np.ndarray, targets: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("batch inputs and targets must be 2-D")
    if x.shape[0] == 0:
        raise InsufficientDataError("empty batch")
    if x.shape[1] != spec.input_dim or y.shape[1] != spec.horizon or x.shape[0] != y.shape[0]:
        raise ShapeError(
            f"batch shapes {x.shape}/{y.shape} do not match model "
            f"({spec.input_dim} inputs, {spec.horizon} horizon)"
        )
    return x, y


def loss(params: ModelParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over samples and horizon steps.

    Overflow to inf is deliberate and silent: divergence is detected from
    non-finite values by the training loop, which reports the round.
    """
    x, y = _check_batch(params.spec, inputs, targets)
    with np.errstate(over="ignore", invalid="ignore"):
        r = predict_batch(params, x) - y
        return float(np.mean(r * r))


def loss_and_grad(
    params: ModelParams, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss plus the exact analytic gradient, flattened in parameter layout.

    With n samples, horizon h, residual R = pred - Y, and G = 2R/(n*h):

    * linear: dW = G^T X, db = column sums of G
    * mlp:    dW2 = G^T A, db2 = colsum G, dZ1 = (G W2) * (1 - A^2),
              dW1 = dZ1^T X, db1 = colsum dZ1   (A = tanh(X W1^T + b1))
    """
    spec = params.spec
    x, y = _check_batch(spec, inputs, targets)
    n, h = y.shape
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.kind == "linear":
            w, b = _unflatten(spec, params.values)
            r = x @ w.T + b - y
            g = (2.0 / (n * h)) * r
            grad = _flatten(spec, g.T @ x, g.sum(axis=0))
            return float(np.mean(r * r)), grad
        w1, b1, w2, b2 = _unflatten(spec, params.values)
        a = np.tanh(x @ w1.T + b1)
        r = a @ w2.T + b2 - y
        g = (2.0 / (n * h)) * r
        dz1 = (g @ w2) * (1.0 - a * a)
        grad = _flatten(spec, dz1.T @ x, dz1.sum(axis=0), g.T @ a, g.sum(axis=0))
        return float(np.mean(r * r)), grad


_KIND_CODES = {"linear": 0, "mlp": 1}
_KIND_NAMES = {code: kind for kind, code in _KIND_CODES.items()}


def to_bytes(params: ModelParams) -> bytes:
    """Serialize to the wire blob: 16-byte header + little-endian float64s."""
    spec = params.spec
    header = PARAM_HEADER.pack(
        _KIND_CODES[spec.kind], spec.input_dim, spec.hidden_dim, spec.horizon
    )
    return header + params.values.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < PARAM_HEADER_BYTES:
        raise ShapeError(f"parameter blob too short ({len(blob)} bytes)")
    code, d, m, h = PARAM_HEADER.unpack_from(blob)
    if code not in _KIND_NAMES:
        raise ShapeError(f"unknown model kind code {code}")
    spec = ModelSpec(_KIND_NAMES[code], d, h, m)
    values = np.frombuffer(blob, dtype="<f8", offset=PARAM_HEADER_BYTES)
    if values.shape[0] != spec.param_count:
        raise ShapeError(
            f"blob carries {values.shape[0]} values, spec requires {spec.param_count}"
        )
    return ModelParams(spec, values.astype(np.float64))


def param_message_bytes(spec: ModelSpec) -> int:
    """Exact size of one serialized parameter message."""
    return PARAM_HEADER_BYTES + 8 * spec.param_count
