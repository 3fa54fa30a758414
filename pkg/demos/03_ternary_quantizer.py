"""
Ternary weights at initialization
=================================

Thresholding uniform He-initialized weights at 0.7 E|w| zeroes 35% of them
for every fan-in K, leaving a quantized weight variance of 0.65. Under
sign activations (unit-variance inputs, derivative 1) the measured
pre-activation variance is K * 0.65; the half-factor model
``predict_sigma_sq_ternary`` gives half of that. The backward ratio
does not depend on that factor, since it cancels between layers.
"""
# %%
from qnorm import NetworkSpec, theory
from qnorm.experiment import ExperimentConfig, realized_ternary_stats, run_experiment
from qnorm.numerics import RngStream

for K in (16, 256, 1024):
    delta = theory.ternary_threshold(K)
    zero, feasible = theory.sparsity_feasibility(delta, K)
    var, realized_zero = realized_ternary_stats(NetworkSpec([K, K, K], quant_mode="ternary"), RngStream(K))
    print(f"K={K:5d}  delta={delta:.5f}  predicted var={theory.ternary_weight_variance(delta, K):.3f}"
          f"  realized var={var:.4f}  zeros={realized_zero:.4f}  feasible={feasible}")

# %%
K = 256
spec = NetworkSpec([K] * 4, quant_mode="ternary", batchnorm=True, sign_activations=True, batch_size=128)
stats = run_experiment(ExperimentConfig(spec, replications=10)).stats
for s in stats.layers[1:]:
    print(f"layer {s.layer}: measured sigma^2 = {s.sigma_hat ** 2:7.2f}   K*Var = {K * 0.65:7.2f}"
          f"   half-factor model = {theory.predict_sigma_sq_ternary(K, 0.65):7.2f}")
print("measured ratios:", {l: round(r, 4) for l, r in stats.measured_ratios().items()})

# %%
# Raising the threshold factor past 1.0 zeroes more than half the weights.
wide = NetworkSpec([K] * 3, quant_mode="ternary", delta_factor=1.5)
print("\n", theory.quantizer_summary(wide)[0])
var, zero = realized_ternary_stats(wide, RngStream(1))
print(f"one draw: Var(w~) = {var:.4f}, zeros = {zero:.4f}")
