"""
Width ratio and batch size
==========================

With BatchNorm the per-layer backward factor of a quantized net becomes
K_{l+1} / K_{l-1}, so growing widths still amplify the gradient. The
finite-batch correction shrinks as B grows, and the stabilization factor
(gamma / B)^2 (B^2 + 2B - 1 + Var(s_hat^2)) tends to 1 from above.
"""
# %%
import numpy as np

from qnorm import ExperimentConfig, NetworkSpec, run_comparison, theory

widths = [32, 64, 128, 256, 512]
for mode in ("binary", "ternary"):
    spec = NetworkSpec(widths, quant_mode=mode, batchnorm=True, sign_activations=True, batch_size=64)
    report, _ = run_comparison(ExperimentConfig(spec, replications=20))
    print(mode, [(e.layer, round(e.measured_ratio, 3), e.predicted_ratio) for e in report.entries])

# %%
print("\n   B   mean |ratio - 1|   stabilization factor")
for B in (8, 16, 32, 64, 128):
    spec = NetworkSpec([128] * 5, quant_mode="binary", batchnorm=True, sign_activations=True, batch_size=B)
    report, _ = run_comparison(ExperimentConfig(spec, replications=20))
    dev = np.mean([abs(e.measured_ratio - 1) for e in report.entries])
    print(f"{B:4d}   {dev:16.4f}   {theory.stabilization_factor(1.0, B):20.5f}")
