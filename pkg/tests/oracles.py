"""Reference implementations used only by the tests."""
import numpy as np


def naive_matmul(A, W):
    B, K = A.shape
    out = np.zeros((B, W.shape[1]))
    for i in range(B):
        for j in range(W.shape[1]):
            acc = 0.0
            for k in range(K):
                acc += float(A[i, k]) * float(W[k, j])
            out[i, j] = acc
    return out


def ref_ternarize(w, delta):
    out = np.empty_like(w)
    for idx, v in np.ndenumerate(w):
        if v < -delta:
            out[idx] = -1.0
        elif v > delta:
            out[idx] = 1.0
        else:
            out[idx] = 0.0
    return out


def ref_sign(w):
    return np.vectorize(lambda v: 1.0 if v >= 0 else -1.0, otypes=[float])(w)


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max absolute deviation scaled by the largest gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)
