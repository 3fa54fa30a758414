"""
BatchNorm backward by hand
==========================

The BatchNorm input gradient removes, per neuron, the batch mean of the
incoming gradient and its projection on the standardized pre-activations.
This script checks that against finite differences, shows the two exact
identities it implies, and folds BatchNorm into a bias in front of sign.
"""
# %%
import numpy as np

from qnorm.layers import (BatchNormLayer, batchnorm_backward, batchnorm_forward,
                          fold_batchnorm_bias, sign)

rng = np.random.default_rng(0)
B, K = 16, 4
S = rng.normal(size=(B, K)) * 3 + 1
bn = BatchNormLayer(rng.uniform(0.5, 2, K), rng.normal(size=K), epsilon=0.0)
Z, cache = batchnorm_forward(S, bn)
print("s_hat column means", cache.s_hat.mean(axis=0).round(12))
print("s_hat column variances", cache.s_hat.var(axis=0).round(12), "\n")

# %%
# A scalar probe loss sum(Z * P) has dL/dZ = P.
P = rng.normal(size=(B, K))
grad_S, grad_gamma, grad_beta = batchnorm_backward(P, cache, bn)

h = 1e-5
num = np.zeros_like(S)
for idx in np.ndindex(S.shape):
    Sp, Sm = S.copy(), S.copy()
    Sp[idx] += h
    Sm[idx] -= h
    num[idx] = ((batchnorm_forward(Sp, bn)[0] - batchnorm_forward(Sm, bn)[0]) * P).sum() / (2 * h)
print("max |analytic - finite difference| =", np.abs(grad_S - num).max())

# %%
# The gradient is orthogonal to both the constant vector and s_hat, per column.
print("sum_b grad_S         :", grad_S.sum(axis=0))
print("sum_b s_hat * grad_S :", (cache.s_hat * grad_S).sum(axis=0))

# %%
# In front of a sign nonlinearity, BatchNorm with gamma > 0 is a per-neuron bias.
b = fold_batchnorm_bias(cache, bn)
print("\nfolded bias", b)
print("sign(BN(S)) == sign(S - b):", bool(np.all(sign(Z) == sign(S - b))))
