"""Dense, BatchNorm and quantizer layers with hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import ShapeError, matmul


class QuantMode(str, Enum):
    FULL_PRECISION = "full_precision"
    BINARY = "binary"
    TERNARY = "ternary"


class DegenerateBatchError(ValueError):
    pass


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(x >= 0, 1.0, -1.0)


def ternarize(w: np.ndarray, delta: float) -> np.ndarray:
    # |w| == delta maps to 0
    out = np.zeros_like(w, dtype=np.float64)
    out[w > delta] = 1.0
    out[w < -delta] = -1.0
    return out


@dataclass
class DenseLayer:
    """Bias-free dense layer holding latent full-precision weights."""

    W: np.ndarray
    quant_mode: QuantMode = QuantMode.FULL_PRECISION
    delta: float = 0.0

    def __post_init__(self):
        self.quant_mode = QuantMode(self.quant_mode)
        if self.W.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.W.shape}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.quant_mode is QuantMode.TERNARY and not self.delta > 0:
            raise ValueError("ternary layers need delta > 0")

    @property
    def fan_in(self) -> int:
        return self.W.shape[0]

    @property
    def fan_out(self) -> int:
        return self.W.shape[1]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-8

    @classmethod
    def init(cls, width: int, epsilon: float = 1e-8) -> "BatchNormLayer":
        return cls(np.ones(width), np.zeros(width), epsilon)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma and beta must be vectors of equal length")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class BatchNormCache:
    mu: np.ndarray
    sigma: np.ndarray
    s_hat: np.ndarray = field(repr=False)


def effective_weights(layer: DenseLayer) -> np.ndarray:
    if layer.quant_mode is QuantMode.BINARY:
        return sign(layer.W)
    if layer.quant_mode is QuantMode.TERNARY:
        return ternarize(layer.W, layer.delta)
    return layer.W


def dense_forward(X: np.ndarray, layer: DenseLayer) -> np.ndarray:
    return matmul(X, effective_weights(layer))


def dense_backward(grad_S: np.ndarray, X: np.ndarray | None, layer: DenseLayer,
                   weight_grad: bool = True):
    """Backward pass of a dense layer.

    Gradients reach the latent weights through a straight-through estimator,
    so ``grad_W`` is the gradient with respect to the effective weights.
    Pass ``weight_grad=False`` (and ``X=None``) to skip ``grad_W``.

    Returns ``(grad_X, grad_W)``; ``grad_W`` is None when skipped.
    """
    W_eff = effective_weights(layer)
    if grad_S.shape[1] != W_eff.shape[1]:
        raise ShapeError(f"grad_S {grad_S.shape} does not match weights {W_eff.shape}")
    grad_X = matmul(grad_S, W_eff.T)
    grad_W = None
    if weight_grad:
        if X is None or X.shape != (grad_S.shape[0], W_eff.shape[0]):
            shape = None if X is None else X.shape
            raise ShapeError(f"X {shape} does not match grad_S {grad_S.shape} and weights {W_eff.shape}")
        grad_W = matmul(X.T, grad_S)
    return grad_X, grad_W


def batchnorm_forward(S: np.ndarray, bn: BatchNormLayer) -> tuple[np.ndarray, BatchNormCache]:
    """Training-mode BatchNorm using batch statistics with divisor B."""
    B, K = S.shape
    if B < 2:
        raise ValueError(f"BatchNorm needs batch size >= 2, got {B}")
    if bn.gamma.shape[0] != K:
        raise ShapeError(f"BatchNorm width {bn.gamma.shape[0]} does not match input {S.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        mu = S.sum(axis=0) / B
        centred = S - mu
        var = (centred * centred).sum(axis=0) / B
        sigma = np.sqrt(var + bn.epsilon)
    if np.any(sigma == 0):
        bad = np.flatnonzero(sigma == 0).tolist()
        raise DegenerateBatchError(f"degenerate batch column(s) {bad}: zero variance with epsilon=0")
    with np.errstate(over="ignore", invalid="ignore"):
        s_hat = centred / sigma
        Z = bn.gamma * s_hat + bn.beta
    return Z, BatchNormCache(mu, sigma, s_hat)


def batchnorm_backward(grad_Z: np.ndarray, cache: BatchNormCache, bn: BatchNormLayer):
    """Exact BatchNorm input gradient.

    grad_S = (gamma/sigma) * (g - mean_b(g) - s_hat * mean_b(g * s_hat))

    Returns ``(grad_S, grad_gamma, grad_beta)``.
    """
    if grad_Z.shape != cache.s_hat.shape:
        raise ShapeError(f"grad_Z {grad_Z.shape} does not match cache {cache.s_hat.shape}")
    B = grad_Z.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        grad_beta = grad_Z.sum(axis=0)
        grad_gamma = (grad_Z * cache.s_hat).sum(axis=0)
        grad_S = (bn.gamma / cache.sigma) * (
            grad_Z - grad_beta / B - cache.s_hat * (grad_gamma / B)
        )
    return grad_S, grad_gamma, grad_beta


def ste_activation(S: np.ndarray, quantized: bool = True) -> np.ndarray:
    return sign(S) if quantized else S


def ste_activation_backward(grad: np.ndarray) -> np.ndarray:
    # straight-through, no clipping window
    return grad


def fold_batchnorm_bias(cache: BatchNormCache, bn: BatchNormLayer) -> np.ndarray:
    """Bias ``b`` such that ``sign(BN(s)) == sign(s - b)`` when gamma > 0."""
    if np.any(bn.gamma == 0):
        raise ValueError("cannot fold BatchNorm with gamma == 0")
    return cache.mu - (cache.sigma / bn.gamma) * bn.beta
