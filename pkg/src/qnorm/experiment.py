"""Monte Carlo measurement of per-layer gradient variance at initialization.

Each replication draws weights (optionally), an input batch and an injected
output gradient ``dL/ds^L`` from its own RNG streams, runs one forward and
one backward pass, and reduces the gradients to mergeable moments. Results
are aggregated in replication order, so they do not depend on how many
worker threads were used.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import theory
from .layers import (
    BatchNormLayer,
    DenseLayer,
    QuantMode,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    effective_weights,
    fold_batchnorm_bias,
    sign,
    ste_activation,
    ste_activation_backward,
)
from .numerics import Moments, RngStream, pooled_moments_variance, sample_normal, sample_uniform
from .theory import NetworkSpec, PredictionReport

log = logging.getLogger(__name__)

THREADS_ENV = "QNORM_THREADS"
# stream id holding the weights shared by every replication in DataOnly mode
SHARED_WEIGHTS_STREAM = 2**62


class Resample(str, Enum):
    WEIGHTS_AND_DATA = "weights_and_data"
    DATA_ONLY = "data_only"


@dataclass(frozen=True)
class ExperimentConfig:
    spec: NetworkSpec
    replications: int = 50
    master_seed: int = 0
    resample: Resample = Resample.WEIGHTS_AND_DATA
    epsilon_bn: float = 1e-8
    tolerance: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "resample", Resample(self.resample))
        if self.replications < 2:
            raise ValueError(f"replications must be >= 2, got {self.replications}")
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")
        if self.epsilon_bn < 0:
            raise ValueError("epsilon_bn must be >= 0")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"]["widths"] = list(self.spec.widths)
        return json.loads(json.dumps(d, default=lambda o: o.value))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class Network:
    dense: list[DenseLayer]
    batchnorm: list[BatchNormLayer] | None
    sign_activations: bool
    warnings: list[str] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.dense)


def build_network(spec: NetworkSpec, rng: RngStream, epsilon: float = 1e-8) -> Network:
    """Draw a network at initialization; weights use each layer's fan-in."""
    dense = []
    warnings = []
    for l in range(1, spec.depth + 1):
        k_in, k_out = spec.widths[l - 1], spec.widths[l]
        p = theory.init_params(spec.init, k_in)
        if spec.init.is_uniform:
            W = sample_uniform(rng, -p, p, k_in, k_out)
        else:
            W = sample_normal(rng, 0.0, p, k_in, k_out)
        delta = 0.0
        if spec.quant_mode is QuantMode.TERNARY:
            delta = theory.ternary_threshold(k_in, spec.init, spec.delta_factor)
            zero, feasible = theory.sparsity_feasibility(delta, k_in, spec.init)
            if not feasible:
                msg = f"layer {l}: predicted ternary zero fraction {zero:.3f} >= 0.5"
                log.warning(msg)
                warnings.append(msg)
            if delta == 0:
                # delta_factor = 0 degenerates to sign quantization
                dense.append(DenseLayer(W, QuantMode.BINARY))
                continue
        dense.append(DenseLayer(W, spec.quant_mode, delta))
    bns = [BatchNormLayer.init(k, epsilon) for k in spec.widths[1:]] if spec.batchnorm else None
    return Network(dense, bns, spec.sign_activations, warnings)


@dataclass
class ReplicationResult:
    """Gradients ``dL/ds^l`` (index 0 is layer 1) and BatchNorm statistics.

    Entries of ``grads`` are None for layers below the point where the
    backward pass stopped producing finite values.
    """

    index: int
    grads: list[np.ndarray | None]
    sigma: list[np.ndarray] | None
    s_hat: list[np.ndarray] | None
    truncated_at: int | None = None


def _finite(g: np.ndarray) -> bool:
    if not np.all(np.isfinite(g)):
        return False
    with np.errstate(over="ignore"):
        return bool(np.isfinite(np.square(g).sum()))


def run_replication(net: Network, config: ExperimentConfig, index: int) -> ReplicationResult:
    spec = config.spec
    rng = RngStream(config.master_seed, 2 * index)
    X = sample_normal(rng, 0.0, math.sqrt(spec.var_x), spec.batch_size, spec.widths[0])
    G = sample_normal(rng, 0.0, math.sqrt(spec.var_gL), spec.batch_size, spec.widths[-1])

    caches = []
    a = X
    with np.errstate(over="ignore", invalid="ignore"):
        for l, layer in enumerate(net.dense):
            s = dense_forward(a, layer)
            if net.batchnorm is not None:
                z, cache = batchnorm_forward(s, net.batchnorm[l])
                caches.append(cache)
            else:
                z = s
            a = ste_activation(z, net.sign_activations)

    grads: list[np.ndarray | None] = [None] * net.depth
    grads[-1] = G
    g = G
    truncated_at = None
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(net.depth - 2, -1, -1):
            g_a, _ = dense_backward(g, None, net.dense[l + 1], weight_grad=False)
            g = ste_activation_backward(g_a)
            if net.batchnorm is not None:
                g, _, _ = batchnorm_backward(g, caches[l], net.batchnorm[l])
            if not _finite(g):
                truncated_at = l + 1
                break
            grads[l] = g

    sigma = [c.sigma for c in caches] if caches else None
    s_hat = [c.s_hat for c in caches] if caches else None
    return ReplicationResult(index, grads, sigma, s_hat, truncated_at)


@dataclass
class ReplicationSummary:
    index: int
    grad_moments: list[Moments | None]
    sigma_mean: list[float] | None
    shat_sq_moments: list[Moments] | None
    truncated_at: int | None


def summarize(result: ReplicationResult) -> ReplicationSummary:
    gm = [None if g is None else Moments.from_array(g) for g in result.grads]
    sig = None if result.sigma is None else [float(s.mean()) for s in result.sigma]
    sh = None if result.s_hat is None else [Moments.from_array(s * s) for s in result.s_hat]
    return ReplicationSummary(result.index, gm, sig, sh, result.truncated_at)


@dataclass
class LayerStats:
    layer: int
    empirical_var: float | None
    stderr: float | None
    sample_count: int
    truncated_count: int
    sigma_hat: float | None = None
    var_shat_sq: float | None = None


@dataclass
class GradientStats:
    layers: list[LayerStats]
    replications: int
    excluded: int = 0

    def var(self, layer: int) -> float | None:
        return self.layers[layer - 1].empirical_var

    def measured_ratios(self) -> dict[int, float]:
        out = {}
        for lo, hi in zip(self.layers[:-1], self.layers[1:]):
            if lo.empirical_var is None or hi.empirical_var is None or hi.empirical_var == 0:
                out[lo.layer] = float("nan")
            else:
                out[lo.layer] = lo.empirical_var / hi.empirical_var
        return out


def estimate(summaries: list[ReplicationSummary]) -> GradientStats:
    """Pool per-replication moments into per-layer variance estimates."""
    if len(summaries) < 2:
        raise ValueError(f"estimate needs >= 2 replications, got {len(summaries)}")
    summaries = sorted(summaries, key=lambda s: s.index)
    depth = len(summaries[0].grad_moments)
    layers = []
    for i in range(depth):
        groups = [s.grad_moments[i] for s in summaries if s.grad_moments[i] is not None]
        truncated = len(summaries) - len(groups)
        n = sum(g.n for g in groups)
        if n >= 2:
            var, se = pooled_moments_variance(groups)
        else:
            var, se = None, None
        st = LayerStats(i + 1, var, se, n, truncated)
        if summaries[0].sigma_mean is not None:
            st.sigma_hat = float(np.mean([s.sigma_mean[i] for s in summaries]))
            total = Moments(0, 0.0, 0.0)
            for s in summaries:
                total = total.merge(s.shat_sq_moments[i])
            st.var_shat_sq = total.var
        layers.append(st)
    excluded = sum(1 for s in summaries if s.truncated_at is not None)
    return GradientStats(layers, len(summaries), excluded)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
        threads = int(raw)
    if threads < 0:
        raise ValueError(f"thread count must be >= 0, got {threads}")
    return threads or (os.cpu_count() or 1)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    stats: GradientStats
    warnings: list[str]


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> ExperimentResult:
    spec = config.spec
    shared = None
    if config.resample is Resample.DATA_ONLY:
        shared = build_network(spec, RngStream(config.master_seed, SHARED_WEIGHTS_STREAM),
                               config.epsilon_bn)

    def one(r: int) -> tuple[ReplicationSummary, list[str]]:
        net = shared or build_network(spec, RngStream(config.master_seed, 2 * r + 1), config.epsilon_bn)
        return summarize(run_replication(net, config, r)), net.warnings

    n_threads = min(resolve_threads(threads), config.replications)
    if n_threads == 1:
        out = [one(r) for r in range(config.replications)]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            out = list(pool.map(one, range(config.replications)))
    warnings = sorted({w for _, ws in out for w in ws})
    return ExperimentResult(config, estimate([s for s, _ in out]), warnings)


@dataclass
class LayerComparison:
    layer: int
    measured_ratio: float
    predicted_ratio: float
    rel_dev: float
    passed: bool


@dataclass
class ComparisonReport:
    entries: list[LayerComparison]
    tolerance: float
    metadata: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)


def compare(stats: GradientStats, prediction: PredictionReport, tolerance: float) -> ComparisonReport:
    measured = stats.measured_ratios()
    predicted = prediction.ratios()
    if set(measured) != set(predicted):
        raise ValueError(f"layer mismatch: measured {sorted(measured)} vs predicted {sorted(predicted)}")
    entries = []
    for l in sorted(predicted):
        m, p = measured[l], predicted[l]
        dev = abs(m - p) / p if math.isfinite(m) else float("inf")
        entries.append(LayerComparison(l, m, p, dev, bool(dev <= tolerance)))
    fids = sorted({e.formula_id for e in prediction.entries})
    return ComparisonReport(entries, tolerance, {"formula_ids": fids})


def run_comparison(config: ExperimentConfig, threads: int | None = None,
                   tolerance: float | None = None) -> tuple[ComparisonReport, ExperimentResult]:
    result = run_experiment(config, threads)
    report = compare(result.stats, theory.predict(config.spec), config.tolerance if tolerance is None else tolerance)
    report.metadata.update(config_hash=config.config_hash(), master_seed=config.master_seed)
    return report, result


def log_variance_slope(stats: GradientStats) -> float:
    """Least-squares slope of log(empirical variance) against layer index."""
    pts = [(s.layer, math.log(s.empirical_var)) for s in stats.layers
           if s.empirical_var is not None and s.empirical_var > 0]
    if len(pts) < 2:
        raise ValueError("need at least two measurable layers to fit a slope")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def realized_ternary_stats(spec: NetworkSpec, rng: RngStream, layer: int = 1) -> tuple[float, float]:
    """Variance and zero fraction of one freshly drawn ternarized layer."""
    if spec.quant_mode is not QuantMode.TERNARY:
        raise ValueError("spec must be ternary")
    net = build_network(spec, rng)
    w = effective_weights(net.dense[layer - 1])
    return float(np.var(w)), float(np.mean(w == 0))




def fold_check(seed: int, B: int = 32, K: int = 16, trials: int = 1000,
               negative_gamma: bool = False) -> tuple[int, int]:
    """Count elements where ``sign(BN(S)) != sign(S - b)`` over random instances.

    Each trial draws S with random per-column location and scale, gamma in
    (0.1, 2) and beta ~ N(0, 1), with epsilon = 0. ``negative_gamma`` flips
    the sign of one gamma entry per trial. Returns ``(mismatches, elements)``.
    """
    rng = RngStream(seed, 0)
    gen = rng.generator
    mismatches = 0
    for _ in range(trials):
        S = gen.normal(size=(B, K)) * gen.uniform(0.1, 10.0, size=K) + gen.normal(0.0, 5.0, size=K)
        gamma = gen.uniform(0.1, 2.0, size=K)
        if negative_gamma:
            gamma[gen.integers(K)] *= -1.0
        bn = BatchNormLayer(gamma, gen.normal(size=K), epsilon=0.0)
        Z, cache = batchnorm_forward(S, bn)
        b = fold_batchnorm_bias(cache, bn)
        mismatches += int(np.count_nonzero(sign(Z) != sign(S - b)))
    return mismatches, trials * B * K
