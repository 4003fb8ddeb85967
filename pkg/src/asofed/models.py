"""Parameter containers and the three small model families.

Every family has a hand-derived gradient; ``finite_difference_grad`` is the
independent oracle used to validate them.  Weight matrices are stored as
``(fan_out, fan_in)`` so that a row of the first layer holds one unit's
weights over the input features, and biases as ``(1, fan_out)``.  All
layers live in one flat float64 buffer; ``ParamSet.layers`` are views.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("linear-regression", "logistic-classification", "mlp-1hidden")


class ShapeError(ValueError):
    """Raised when parameter or batch shapes are incompatible."""


class EmptyInputError(ValueError):
    """Raised when an operation receives an empty batch."""


@dataclass(frozen=True, eq=False)
class ParamSet:
    flat: np.ndarray
    shape_signature: tuple[tuple[int, int], ...]
    first_layer_index: int = 0
    layers: list[np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        sig = tuple((int(r), int(c)) for r, c in self.shape_signature)
        if flat.ndim != 1 or flat.size != sum(r * c for r, c in sig):
            raise ShapeError(f"flat buffer of size {flat.size} does not match signature {sig}")
        if not 0 <= self.first_layer_index < len(sig):
            raise ShapeError(f"first_layer_index {self.first_layer_index} out of range")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "shape_signature", sig)
        views, off = [], 0
        for r, c in sig:
            views.append(flat[off:off + r * c].reshape(r, c))
            off += r * c
        object.__setattr__(self, "layers", views)

    @classmethod
    def from_layers(cls, layers, first_layer_index=0):
        arrs = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in layers]
        flat = np.concatenate([a.ravel() for a in arrs]) if arrs else np.zeros(0)
        return cls(flat, tuple(a.shape for a in arrs), first_layer_index)

    @property
    def first_layer(self) -> np.ndarray:
        return self.layers[self.first_layer_index]

    def copy(self) -> ParamSet:
        return ParamSet(self.flat.copy(), self.shape_signature, self.first_layer_index)

    def zeros_like(self) -> ParamSet:
        return ParamSet(np.zeros_like(self.flat), self.shape_signature, self.first_layer_index)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def check_compatible(self, other: ParamSet) -> None:
        if self.shape_signature != other.shape_signature:
            raise ShapeError(
                f"shape mismatch: {self.shape_signature} vs {other.shape_signature}")

    def __len__(self):
        return self.flat.size


def axpy(dst: ParamSet, scale: float, src: ParamSet) -> ParamSet:
    """Return ``dst + scale * src`` as a new ParamSet."""
    dst.check_compatible(src)
    return ParamSet(dst.flat + scale * src.flat, dst.shape_signature, dst.first_layer_index)


def to_bytes(params: ParamSet) -> bytes:
    """Serialize as: u32 layer count, (u32 rows, u32 cols) per layer, then
    the little-endian float64 stream.  The first-layer index is not part of
    the wire format; it is always 0 for the model families here."""
    head = struct.pack("<I", len(params.shape_signature))
    for r, c in params.shape_signature:
        head += struct.pack("<II", r, c)
    return head + params.flat.astype("<f8").tobytes()


def from_bytes(data: bytes, first_layer_index: int = 0) -> ParamSet:
    if len(data) < 4:
        raise ValueError("truncated ParamSet stream")
    (n,) = struct.unpack_from("<I", data, 0)
    off = 4
    if len(data) < off + 8 * n:
        raise ValueError("truncated ParamSet header")
    sig = []
    for _ in range(n):
        sig.append(struct.unpack_from("<II", data, off))
        off += 8
    size = sum(r * c for r, c in sig)
    if len(data) != off + 8 * size:
        raise ValueError(f"expected {size} float64 values, got {(len(data) - off) / 8}")
    flat = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64)
    return ParamSet(flat, tuple(sig), first_layer_index)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_dim: int
    output_dim: int
    hidden_dim: int = 0
    task: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("invalid dimension: input_dim and output_dim must be >= 1")
        if self.family == "mlp-1hidden" and self.hidden_dim < 1:
            raise ValueError("invalid dimension: mlp-1hidden needs hidden_dim >= 1")
        if not self.task:
            task = "regression" if self.family == "linear-regression" else "classification"
            object.__setattr__(self, "task", task)
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def shape_signature(self) -> tuple[tuple[int, int], ...]:
        d, o, h = self.input_dim, self.output_dim, self.hidden_dim
        if self.family == "mlp-1hidden":
            return ((h, d), (1, h), (o, h), (1, o))
        return ((o, d), (1, o))


def init_params(spec: ModelSpec, seed) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for rows, cols in spec.shape_signature:
        if rows == 1:  # bias
            layers.append(np.zeros((rows, cols)))
        else:
            s = np.sqrt(6.0 / (rows + cols))
            layers.append(rng.uniform(-s, s, size=(rows, cols)))
    return ParamSet.from_layers(layers)


@dataclass
class GradResult:
    grad: ParamSet
    loss: float
    n_samples: int


def _check_batch(spec: ModelSpec, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptyInputError("empty batch")
    if X.shape[1] != spec.input_dim:
        raise ShapeError(f"feature dim {X.shape[1]} != model input_dim {spec.input_dim}")
    y = np.asarray(y)
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    return X, y


def _output_grad(spec: ModelSpec, Z, y):
    """Mean loss and d(loss)/dZ for raw outputs ``Z`` of shape (n, out)."""
    n = Z.shape[0]
    if spec.task == "regression":
        Y = np.asarray(y, dtype=np.float64).reshape(n, spec.output_dim)
        R = Z - Y
        return 0.5 * float(np.sum(R * R)) / n, R / n
    labels = np.asarray(y).astype(np.int64).ravel()
    if spec.output_dim == 1:
        z = Z[:, 0]
        # log(1 + exp(-|z|)) form is stable for large |z|
        loss = np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(loss.mean()), ((p - labels) / n)[:, None]
    Zs = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Zs).sum(axis=1))
    loss = float(np.mean(logsum - Zs[np.arange(n), labels]))
    P = np.exp(Zs - logsum[:, None])
    P[np.arange(n), labels] -= 1.0
    return loss, P / n


def forward(spec: ModelSpec, params: ParamSet, X) -> np.ndarray:
    """Raw model outputs (regression values or logits), shape (n, out)."""
    X = np.asarray(X, dtype=np.float64)
    if spec.family == "mlp-1hidden":
        W1, b1, W2, b2 = params.layers
        return np.tanh(X @ W1.T + b1) @ W2.T + b2
    W, b = params.layers
    return X @ W.T + b


def predict(spec: ModelSpec, params: ParamSet, X) -> np.ndarray:
    Z = forward(spec, params, X)
    if spec.task == "regression":
        return Z[:, 0] if spec.output_dim == 1 else Z
    if spec.output_dim == 1:
        return (Z[:, 0] > 0).astype(np.int64)
    return Z.argmax(axis=1)


def loss_and_grad(spec: ModelSpec, params: ParamSet, X, y, out: ParamSet | None = None) -> GradResult:
    """Mean loss over the batch and its exact gradient.

    ``out`` may be a preallocated ParamSet that receives the gradient.
    """
    if params.shape_signature != spec.shape_signature:
        raise ShapeError(f"params {params.shape_signature} do not match spec {spec.shape_signature}")
    X, y = _check_batch(spec, X, y)
    grad = out if out is not None else params.zeros_like()
    if spec.family == "mlp-1hidden":
        W1, b1, W2, b2 = params.layers
        gW1, gb1, gW2, gb2 = grad.layers
        H = np.tanh(X @ W1.T + b1)
        loss, dZ = _output_grad(spec, H @ W2.T + b2, y)
        np.matmul(dZ.T, H, out=gW2)
        np.sum(dZ, axis=0, keepdims=True, out=gb2)
        dH = dZ @ W2
        dH *= 1.0 - H * H
        np.matmul(dH.T, X, out=gW1)
        np.sum(dH, axis=0, keepdims=True, out=gb1)
    else:
        W, b = params.layers
        gW, gb = grad.layers
        loss, dZ = _output_grad(spec, X @ W.T + b, y)
        np.matmul(dZ.T, X, out=gW)
        np.sum(dZ, axis=0, keepdims=True, out=gb)
    return GradResult(grad, loss, X.shape[0])


def loss_only(spec: ModelSpec, params: ParamSet, X, y) -> float:
    X, y = _check_batch(spec, X, y)
    return _output_grad(spec, forward(spec, params, X), y)[0]


def finite_difference_grad(spec: ModelSpec, params: ParamSet, X, y, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, coordinate by coordinate."""
    base = params.flat
    g = np.empty_like(base)
    probe = params.copy()
    for i in range(base.size):
        probe.flat[i] = base[i] + h
        up = loss_only(spec, probe, X, y)
        probe.flat[i] = base[i] - h
        down = loss_only(spec, probe, X, y)
        probe.flat[i] = base[i]
        g[i] = (up - down) / (2 * h)
    return g


def gradient_relative_error(spec: ModelSpec, params: ParamSet, X, y, h: float = 1e-5) -> float:
    """Relative error ``||analytic - fd|| / max(||analytic||, ||fd||)``."""
    analytic = loss_and_grad(spec, params, X, y).grad.flat
    numeric = finite_difference_grad(spec, params, X, y, h)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
