"""Closed-form predictions of forward and backward variance at initialization.

Layer indexing follows the network: ``widths = [K_0, K_1, ..., K_L]`` where
``K_0`` is the input dimension and layer ``l`` maps ``K_{l-1} -> K_l``.
Backward results are reported for the pre-activation gradients
``dL/ds^l`` of layers ``1..L``; a per-layer *ratio* is
``Var(dL/ds^l) / Var(dL/ds^{l+1})`` and is defined for ``l < L``.

Initialization variances use the fan-in ``K_{l-1}`` of each layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .layers import QuantMode

# Variance of the squared standardized pre-activation when it is Gaussian.
GAUSSIAN_VAR_SHAT_SQ = 2.0
TWN_DELTA_FACTOR = 0.7


class InitScheme(str, Enum):
    UNIFORM_HE2 = "uniform_he2"
    UNIFORM_FAN1 = "uniform_fan1"
    NORMAL_HE2 = "normal_he2"
    NORMAL_FAN1 = "normal_fan1"

    @property
    def gain(self) -> float:
        return 2.0 if self in (InitScheme.UNIFORM_HE2, InitScheme.NORMAL_HE2) else 1.0

    @property
    def is_uniform(self) -> bool:
        return self in (InitScheme.UNIFORM_HE2, InitScheme.UNIFORM_FAN1)


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of an experiment network."""

    widths: tuple[int, ...]
    quant_mode: QuantMode = QuantMode.FULL_PRECISION
    batchnorm: bool = False
    batch_size: int = 64
    init: InitScheme = InitScheme.UNIFORM_HE2
    sign_activations: bool = False
    var_x: float = 1.0
    var_gL: float = 1.0
    delta_factor: float = TWN_DELTA_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(k) for k in self.widths))
        object.__setattr__(self, "quant_mode", QuantMode(self.quant_mode))
        object.__setattr__(self, "init", InitScheme(self.init))
        if len(self.widths) < 3:
            raise ValueError(f"widths needs at least 3 entries (L >= 2 layers), got {list(self.widths)}")
        if any(k < 1 for k in self.widths):
            raise ValueError(f"all widths must be >= 1, got {list(self.widths)}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.var_x > 0:
            raise ValueError(f"var_x must be > 0, got {self.var_x}")
        if not self.var_gL > 0:
            raise ValueError(f"var_gL must be > 0, got {self.var_gL}")
        if not self.delta_factor >= 0:
            raise ValueError(f"delta_factor must be >= 0, got {self.delta_factor}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


@dataclass
class LayerPrediction:
    layer: int
    predicted_var: float
    predicted_ratio: float | None
    formula_id: str


@dataclass
class PredictionReport:
    spec: NetworkSpec
    entries: list[LayerPrediction]
    quantizer: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def ratios(self) -> dict[int, float]:
        return {e.layer: e.predicted_ratio for e in self.entries if e.predicted_ratio is not None}


# -- initialization --------------------------------------------------------

def weight_variance(scheme: InitScheme, fan_in: int) -> float:
    return InitScheme(scheme).gain / fan_in


def init_params(scheme: InitScheme, fan_in: int) -> float:
    """Half-width (uniform laws) or standard deviation (normal laws)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    scheme = InitScheme(scheme)
    var = weight_variance(scheme, fan_in)
    # Var(Uniform(-a, a)) = a^2 / 3
    return math.sqrt(3.0 * var) if scheme.is_uniform else math.sqrt(var)


def mean_abs_weight(scheme: InitScheme, fan_in: int) -> float:
    scheme = InitScheme(scheme)
    p = init_params(scheme, fan_in)
    return p / 2.0 if scheme.is_uniform else p * math.sqrt(2.0 / math.pi)


# -- ternary quantizer statistics -----------------------------------------

def ternary_threshold(K: int, init: InitScheme = InitScheme.UNIFORM_HE2,
                      factor: float = TWN_DELTA_FACTOR) -> float:
    """Threshold ``factor * E|w|`` for a layer with fan-in ``K``.

    Under uniform He init this is ``(factor / 2) * sqrt(6 / K)``.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if InitScheme(init) is InitScheme.UNIFORM_HE2:
        return factor / 2.0 * math.sqrt(6.0 / K)
    return factor * mean_abs_weight(init, K)


def ternary_weight_variance(delta: float, K: int) -> float:
    """Variance of ternarized Uniform(-sqrt(6/K), sqrt(6/K)) weights."""
    a = math.sqrt(6.0 / K)
    if not 0 <= delta <= a:
        raise ValueError(f"delta must lie in [0, {a}], got {delta}")
    return 1.0 - delta / a


def ternary_zero_fraction(delta: float, K: int, init: InitScheme = InitScheme.UNIFORM_HE2) -> float:
    """Probability that a freshly initialized weight ternarizes to 0."""
    init = InitScheme(init)
    p = init_params(init, K)
    if init.is_uniform:
        return min(max(delta / p, 0.0), 1.0)
    return math.erf(delta / (p * math.sqrt(2.0)))


def sparsity_feasibility(delta: float, K: int,
                         init: InitScheme = InitScheme.UNIFORM_HE2) -> tuple[float, bool]:
    """Zero fraction and whether it stays below the 50% feasibility bound."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    zero = ternary_zero_fraction(delta, K, init)
    return zero, zero < 0.5


def predict_sigma_sq_ternary(K_prev: int, var_wt: float) -> float:
    return K_prev * 0.5 * var_wt


# -- helpers shared by the predictors -------------------------------------

def _quantized_weight_variance(spec: NetworkSpec, layer: int) -> float:
    fan_in = spec.widths[layer - 1]
    if spec.quant_mode is QuantMode.BINARY:
        return 1.0
    if spec.quant_mode is QuantMode.TERNARY:
        delta = ternary_threshold(fan_in, spec.init, spec.delta_factor)
        return 1.0 - ternary_zero_fraction(delta, fan_in, spec.init)
    return weight_variance(spec.init, fan_in)


def _input_variances(spec: NetworkSpec) -> list[float]:
    """Variance of the input feeding each layer ``1..L``."""
    out = [spec.var_x]
    var_s = spec.var_x
    for l in range(1, spec.depth):
        var_s = var_s * spec.widths[l - 1] * _quantized_weight_variance(spec, l)
        if spec.batchnorm or spec.sign_activations:
            out.append(1.0)
            var_s = 1.0
        else:
            out.append(var_s)
    return out


def _vars_from_ratios(spec: NetworkSpec, ratios: list[float]) -> list[float]:
    out = [spec.var_gL]
    for r in reversed(ratios):
        out.append(out[-1] * r)
    return out[::-1]


# -- predictors ------------------------------------------------------------

def predict_forward_var_fp(spec: NetworkSpec) -> list[float]:
    """Var(s^l) for layers 1..L of a full-precision network without BatchNorm."""
    if spec.quant_mode is not QuantMode.FULL_PRECISION or spec.batchnorm:
        raise ValueError("forward predictor needs a full-precision network without BatchNorm")
    inputs = _input_variances(spec)
    return [inputs[l - 1] * spec.widths[l - 1] * weight_variance(spec.init, spec.widths[l - 1])
            for l in range(1, spec.depth + 1)]


def predict_backward_var_fp_nobn(spec: NetworkSpec) -> list[float]:
    """Var(dL/ds^l) for layers 1..L: each step back multiplies by K_{l+1} Var(w^{l+1})."""
    if spec.quant_mode is not QuantMode.FULL_PRECISION or spec.batchnorm:
        raise ValueError("predictor needs a full-precision network without BatchNorm")
    return _vars_from_ratios(spec, _nobn_ratios(spec))


def stabilization_factor(gamma: float, B: int, var_shat_sq: float = GAUSSIAN_VAR_SHAT_SQ) -> float:
    """(gamma / B)^2 * (B^2 + 2B - 1 + Var(s_hat^2)); stable when close to 1."""
    if B < 2:
        raise ValueError(f"B must be >= 2, got {B}")
    return (gamma / B) ** 2 * (B * B + 2 * B - 1 + var_shat_sq)


def batchnorm_backward_ratio(gamma: float, B: int, sigma: float, var_shat_sq: float,
                             fan_out_next: int, var_w_next: float) -> float:
    """Per-layer backward variance ratio through a BatchNorm layer."""
    return (gamma / (B * sigma)) ** 2 * (B * B + 2 * B - 1 + var_shat_sq) * fan_out_next * var_w_next


def modeled_sigma(spec: NetworkSpec) -> list[float]:
    """Init-time standard deviation of s^l for layers 1..L."""
    inputs = _input_variances(spec)
    return [math.sqrt(inputs[l - 1] * spec.widths[l - 1] * _quantized_weight_variance(spec, l))
            for l in range(1, spec.depth + 1)]


def predict_backward_var_fp_bn(spec: NetworkSpec, sigma_per_layer=None,
                               var_shat_sq: float = GAUSSIAN_VAR_SHAT_SQ,
                               gamma: float = 1.0) -> list[float]:
    """Backward ratios for layers 1..L-1 of a full-precision BatchNorm network.

    ``sigma_per_layer`` defaults to :func:`modeled_sigma`; measured values can
    be supplied instead.
    """
    if spec.quant_mode is not QuantMode.FULL_PRECISION or not spec.batchnorm:
        raise ValueError("predictor needs a full-precision network with BatchNorm")
    sigma = modeled_sigma(spec) if sigma_per_layer is None else list(sigma_per_layer)
    L = spec.depth
    if len(sigma) < L - 1:
        raise ValueError(f"need sigma for at least {L - 1} layers, got {len(sigma)}")
    return [
        batchnorm_backward_ratio(gamma, spec.batch_size, sigma[l - 1], var_shat_sq,
                                 spec.widths[l + 1], weight_variance(spec.init, spec.widths[l]))
        for l in range(1, L)
    ]


def _width_ratios(spec: NetworkSpec) -> list[float]:
    inputs = _input_variances(spec)
    return [spec.widths[l + 1] / (spec.widths[l - 1] * inputs[l - 1]) for l in range(1, spec.depth)]


def predict_backward_var_binary(spec: NetworkSpec) -> list[float]:
    """Var(dL/ds^l) for layers 1..L of a binary-weight network.

    Without BatchNorm each step back multiplies by ``K_{l+1}``; with
    BatchNorm by ``K_{l+1} / K_{l-1}`` up to a term vanishing with B.
    """
    if spec.quant_mode is not QuantMode.BINARY:
        raise ValueError("predictor needs a binary network")
    return _vars_from_ratios(spec, _width_ratios(spec) if spec.batchnorm else _nobn_ratios(spec))


def predict_backward_var_ternary_bn(spec: NetworkSpec) -> list[float]:
    """Backward ratios ``K_{l+1} / K_{l-1}`` for layers 1..L-1 of a ternary BatchNorm network."""
    if spec.quant_mode is not QuantMode.TERNARY or not spec.batchnorm:
        raise ValueError("predictor needs a ternary network with BatchNorm")
    return _width_ratios(spec)


def _nobn_ratios(spec: NetworkSpec) -> list[float]:
    # K_{l+1} * Var of the (possibly quantized) weights of layer l+1
    return [spec.widths[l + 1] * _quantized_weight_variance(spec, l + 1) for l in range(1, spec.depth)]


def quantizer_summary(spec: NetworkSpec) -> list[dict]:
    """Per-layer threshold, weight variance, zero fraction and feasibility."""
    if spec.quant_mode is not QuantMode.TERNARY:
        return []
    rows = []
    for l in range(1, spec.depth + 1):
        K = spec.widths[l - 1]
        delta = ternary_threshold(K, spec.init, spec.delta_factor)
        zero, feasible = sparsity_feasibility(delta, K, spec.init)
        rows.append({"layer": l, "delta": delta, "var_wt": 1.0 - zero,
                     "zero_fraction": zero, "feasible": feasible})
    return rows


FORMULAS = {
    (QuantMode.FULL_PRECISION, False): "fp_nobn_product",
    (QuantMode.FULL_PRECISION, True): "fp_bn_batchnorm_ratio",
    (QuantMode.BINARY, False): "binary_nobn_width_product",
    (QuantMode.BINARY, True): "binary_bn_width_ratio",
    (QuantMode.TERNARY, False): "ternary_nobn_width_product",
    (QuantMode.TERNARY, True): "ternary_bn_width_ratio",
}


def predict(spec: NetworkSpec, sigma_per_layer=None,
            var_shat_sq: float = GAUSSIAN_VAR_SHAT_SQ) -> PredictionReport:
    """Per-layer predicted backward variance and ratio for any regime."""
    mode, bn = spec.quant_mode, spec.batchnorm
    if mode is QuantMode.FULL_PRECISION and bn:
        ratios = predict_backward_var_fp_bn(spec, sigma_per_layer, var_shat_sq)
    elif bn:
        ratios = _width_ratios(spec)
    else:
        ratios = _nobn_ratios(spec)

    variances = _vars_from_ratios(spec, ratios)
    fid = FORMULAS[(mode, bn)]
    entries = [
        LayerPrediction(l, variances[l - 1], ratios[l - 1] if l < spec.depth else None, fid)
        for l in range(1, spec.depth + 1)
    ]
    notes = {}
    if bn:
        notes["deviation"] = (f"o(1/B^(1-eps)) correction, shrinking as B grows (B={spec.batch_size})"
                              if mode is not QuantMode.FULL_PRECISION else
                              f"finite-batch factor included (B={spec.batch_size}, Var(s_hat^2)={var_shat_sq})")
    return PredictionReport(spec, entries, quantizer_summary(spec), notes)
