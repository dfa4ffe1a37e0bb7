"""Two-layer ReLU networks in flat-parameter and empirical-measure form.

A width-M network maps x to (1/M) * sum_m c_m * relu(w_m . x + b_m).  Its
parameters live either in a flat vector of M contiguous [w | b | c] blocks or
as M uniform-weight atoms (w, b, c) of an empirical measure; the two views are
order-preserving reshapes of each other and share the same forward kernel, so
outputs agree bitwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class NonFiniteError(ValueError):
    """A risk, prediction, or gradient stopped being finite."""


class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class NetworkShape:
    """Architecture of a width-M two-layer ReLU network.

    `reduction` picks how neuron contributions combine: "mean" divides by M
    (the measure-representation form, used by the transport experiments) and
    "sum" does not (the form gradient frameworks train, used by the
    particle-vector experiments; its minimizers stay inside an O(1) init box).
    """

    input_dim: int
    width: int
    output_dim: int = 1
    reduction: str = "mean"

    def __post_init__(self):
        for name in ("input_dim", "width", "output_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f'reduction must be "mean" or "sum", got {self.reduction!r}')

    @property
    def atom_dim(self) -> int:
        return self.input_dim + 1 + self.output_dim

    @property
    def param_count(self) -> int:
        return self.width * self.atom_dim


@dataclass
class EmpiricalMeasure:
    """M uniform-weight atoms in R^(d+1+C), one per hidden neuron.

    `atoms` rows are laid out [w (d) | b | c (C)], matching the flat
    parameter layout.
    """

    input_dim: int
    output_dim: int
    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must be a 2-d array (M, d+1+C)")
        want = self.input_dim + 1 + self.output_dim
        if self.atoms.shape[1] != want:
            raise ValueError(
                f"atom dimension {self.atoms.shape[1]} does not match d+1+C={want}"
            )
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms contain non-finite entries")

    @property
    def width(self) -> int:
        return self.atoms.shape[0]

    @property
    def shape(self) -> NetworkShape:
        return NetworkShape(self.input_dim, self.width, self.output_dim)


def param_blocks(shape: NetworkShape, theta: np.ndarray):
    """Views (W, b, C_out) of a flat parameter vector; no copies."""
    theta = np.asarray(theta)
    if theta.shape != (shape.param_count,):
        raise ValueError(
            f"parameter vector has length {theta.shape}, expected ({shape.param_count},)"
        )
    d = shape.input_dim
    table = theta.reshape(shape.width, shape.atom_dim)
    return table[:, :d], table[:, d], table[:, d + 1 :]


def to_measure(shape: NetworkShape, theta: np.ndarray) -> EmpiricalMeasure:
    """Measure view of a parameter vector (atom order = neuron order).

    Measures always carry the mean (1/M) scaling, so for a sum-reduction
    shape the output block is multiplied by M; the conversion stays a
    bijection and `forward_measure` agrees with `forward` either way.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (shape.param_count,):
        raise ValueError(
            f"parameter vector has length {theta.shape}, expected ({shape.param_count},)"
        )
    table = theta.reshape(shape.width, shape.atom_dim).copy()
    if shape.reduction == "sum":
        table[:, shape.input_dim + 1 :] *= shape.width
    return EmpiricalMeasure(shape.input_dim, shape.output_dim, table)


def to_params(measure: EmpiricalMeasure, reduction: str = "mean") -> np.ndarray:
    table = measure.atoms.copy()
    if reduction == "sum":
        table[:, measure.input_dim + 1 :] /= measure.width
    return table.reshape(-1)


def _check_inputs(shape: NetworkShape, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != shape.input_dim:
        raise ValueError(
            f"input batch has shape {X.shape}, expected (S, {shape.input_dim})"
        )
    return X


def _forward_kernel(
    W: np.ndarray, b: np.ndarray, C_out: np.ndarray, X: np.ndarray, denom: float
) -> np.ndarray:
    # Single code path for both parameter views; keeps them bitwise equal.
    Z = X @ W.T + b
    A = np.maximum(Z, 0.0)
    return (A @ C_out) / denom


def forward_batch(shape: NetworkShape, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Network outputs for a batch, shape (S, C)."""
    X = _check_inputs(shape, X)
    W, b, C_out = param_blocks(shape, theta)
    denom = shape.width if shape.reduction == "mean" else 1.0
    return _forward_kernel(W, b, C_out, X, denom)


def forward(shape: NetworkShape, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Network output for a single input, shape (C,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({shape.input_dim},)")
    return forward_batch(shape, theta, x[None, :])[0]


def forward_measure(measure: EmpiricalMeasure, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (measure.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({measure.input_dim},)")
    return forward_measure_batch(measure, x[None, :])[0]


def forward_measure_batch(measure: EmpiricalMeasure, X: np.ndarray) -> np.ndarray:
    shape = measure.shape
    X = _check_inputs(shape, X)
    d = shape.input_dim
    W = measure.atoms[:, :d]
    b = measure.atoms[:, d]
    C_out = measure.atoms[:, d + 1 :]
    return _forward_kernel(W, b, C_out, X, measure.width)


def _check_targets(kind: LossKind, y: np.ndarray, C: int) -> np.ndarray:
    if kind is LossKind.SQUARED_ERROR:
        if C != 1:
            raise ValueError(f"squared error requires output_dim 1, got {C}")
        return np.asarray(y, dtype=np.float64)
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("cross entropy requires integer class targets")
    if y.size and (y.min() < 0 or y.max() >= C):
        bad = y[(y < 0) | (y >= C)][0]
        raise ValueError(f"class index {bad} out of range [0, {C})")
    return y


def batch_losses(kind: LossKind, y: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """Per-sample losses for predictions of shape (S, C)."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2:
        raise ValueError("predictions must have shape (S, C)")
    if not np.all(np.isfinite(preds)):
        raise NonFiniteError("non-finite prediction")
    C = preds.shape[1]
    y = _check_targets(kind, y, C)
    if kind is LossKind.SQUARED_ERROR:
        return (y - preds[:, 0]) ** 2
    # Fused log-softmax: shift by the row max so alpha-driven extreme logits
    # stay finite.
    shifted = preds - preds.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(len(y)), y]


def loss(kind: LossKind, y_true, y_pred: np.ndarray) -> float:
    """Single-sample loss.

    For SQUARED_ERROR, `y_true` is a real target and `y_pred` a length-1
    output.  For CROSS_ENTROPY, `y_true` is a 0-based class index and
    `y_pred` the logit vector; the softmax is applied internally.
    """
    y_pred = np.atleast_1d(np.asarray(y_pred, dtype=np.float64))
    if kind is LossKind.SQUARED_ERROR:
        y_arr = np.asarray([y_true], dtype=np.float64)
    else:
        y_arr = np.asarray([y_true])
    return float(batch_losses(kind, y_arr, y_pred[None, :])[0])


def empirical_risk(
    shape: NetworkShape, theta: np.ndarray, X: np.ndarray, y: np.ndarray, kind: LossKind
) -> float:
    """Mean loss over the batch, accumulated in ascending sample order."""
    X = _check_inputs(shape, X)
    if len(X) == 0:
        raise ValueError("empty batch")
    preds = forward_batch(shape, theta, X)
    return float(np.mean(batch_losses(kind, y, preds)))


def measure_risk(measure: EmpiricalMeasure, X: np.ndarray, y: np.ndarray, kind: LossKind) -> float:
    """Empirical risk of a measure-form network; mirrors `empirical_risk`."""
    X = _check_inputs(measure.shape, X)
    if len(X) == 0:
        raise ValueError("empty batch")
    preds = forward_measure_batch(measure, X)
    return float(np.mean(batch_losses(kind, y, preds)))


def gradient(
    shape: NetworkShape, theta: np.ndarray, X: np.ndarray, y: np.ndarray, kind: LossKind
) -> np.ndarray:
    """Exact gradient of `empirical_risk` w.r.t. theta (ReLU' (0) := 0)."""
    X = _check_inputs(shape, X)
    S = len(X)
    if S == 0:
        raise ValueError("empty batch")
    W, b, C_out = param_blocks(shape, theta)
    denom = shape.width if shape.reduction == "mean" else 1.0
    C = shape.output_dim
    y = _check_targets(kind, y, C)

    with np.errstate(over="ignore", invalid="ignore"):
        Z = X @ W.T + b
        A = np.maximum(Z, 0.0)
        preds = (A @ C_out) / denom

        if kind is LossKind.SQUARED_ERROR:
            G = (2.0 * (preds[:, 0] - y) / S)[:, None]
        else:
            shifted = preds - preds.max(axis=1, keepdims=True)
            expd = np.exp(shifted)
            P = expd / expd.sum(axis=1, keepdims=True)
            P[np.arange(S), y] -= 1.0
            G = P / S

        dC = (A.T @ G) / denom
        dZ = (G @ C_out.T) / denom
        dZ *= Z > 0
        dW = dZ.T @ X
        db = dZ.sum(axis=0)
    if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db)) and np.all(np.isfinite(dC))):
        raise NonFiniteError("non-finite gradient")

    out = np.empty((shape.width, shape.atom_dim))
    d = shape.input_dim
    out[:, :d] = dW
    out[:, d] = db
    out[:, d + 1 :] = dC
    return out.reshape(-1)


def barron_estimate(measure: EmpiricalMeasure) -> float:
    """Upper estimate of the Barron norm over the measure's support.

    max over atoms of ||c||_inf * (||w||_1 + |b|).  The true norm is an
    infimum over all representing measures, so this is an upper bound.
    """
    d = measure.input_dim
    w_part = np.abs(measure.atoms[:, :d]).sum(axis=1)
    b_part = np.abs(measure.atoms[:, d])
    c_part = np.abs(measure.atoms[:, d + 1 :]).max(axis=1)
    return float(np.max(c_part * (w_part + b_part)))
