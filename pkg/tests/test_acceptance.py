"""Exit criteria, each at its stated tolerance and runtime budget."""
import math
import time

import numpy as np
import pytest

from oracles import central_diff, rel_error
from qnorm import theory
from qnorm.cli import main
from qnorm.experiment import ExperimentConfig, realized_ternary_stats, run_comparison, run_experiment, log_variance_slope
from qnorm.layers import BatchNormLayer, batchnorm_backward, batchnorm_forward
from qnorm.numerics import RngStream
from qnorm.theory import NetworkSpec

_cache = {}


def binary_bn_run(B):
    """Uniform-width binary BatchNorm net, K=256, R=100; shared by criteria 6 and 9."""
    if B not in _cache:
        spec = NetworkSpec([256] * 5, quant_mode="binary", batchnorm=True, sign_activations=True, batch_size=B)
        t0 = time.perf_counter()
        report, _ = run_comparison(ExperimentConfig(spec, replications=100, master_seed=2024))
        _cache[B] = (report, time.perf_counter() - t0)
    return _cache[B]


def test_01_batchnorm_gradient_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        B, K = int(rng.choice([4, 16, 64])), int(rng.choice([1, 8, 32]))
        S = rng.normal(size=(B, K)) * rng.uniform(0.5, 3, K) + rng.normal(size=K)
        gamma, beta, P = rng.uniform(0.5, 2, K), rng.normal(size=K), rng.normal(size=(B, K))

        def loss(S_=S, g_=gamma, b_=beta):
            return float((batchnorm_forward(S_, BatchNormLayer(g_, b_, 0.0))[0] * P).sum())

        bn = BatchNormLayer(gamma, beta, 0.0)
        gs, gg, gb = batchnorm_backward(P, batchnorm_forward(S, bn)[1], bn)
        worst = max(worst,
                    rel_error(gs, central_diff(lambda s: loss(S_=s), S)),
                    rel_error(gg, central_diff(lambda g: loss(g_=g), gamma)),
                    rel_error(gb, central_diff(lambda b: loss(b_=b), beta)))
    ok = acceptance(1, "BatchNorm gradients vs central differences", worst < 1e-6,
                    f"max rel err {worst:.2e} < 1e-6", time.perf_counter() - t0, 10)
    assert ok


def test_02_batchnorm_exact_identities(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        B, K = int(rng.integers(2, 129)), int(rng.integers(1, 33))
        bn = BatchNormLayer(rng.uniform(0.1, 3, K), rng.normal(size=K), 0.0)
        _, cache = batchnorm_forward(rng.normal(size=(B, K)) * rng.uniform(0.1, 10, K), bn)
        gs, _, _ = batchnorm_backward(rng.normal(size=(B, K)), cache, bn)
        worst = max(worst, np.abs(gs.sum(axis=0)).max(), np.abs((cache.s_hat * gs).sum(axis=0)).max())
    ok = acceptance(2, "sum_b grad_S = 0 and sum_b s_hat grad_S = 0", worst < 1e-10,
                    f"max |residual| {worst:.2e} < 1e-10", time.perf_counter() - t0, 5)
    assert ok


def test_03_fold_identity(acceptance, capsys):
    t0 = time.perf_counter()
    code = main(["fold-check"])
    out = capsys.readouterr().out
    ok = acceptance(3, "fold-check defaults (B=32, K=16, 1000 trials)", code == 0 and "mismatches=0" in out,
                    out.strip(), time.perf_counter() - t0, 5)
    assert ok


def test_04_full_precision_baseline(acceptance):
    spec = NetworkSpec([256] * 5, init="uniform_fan1", batch_size=256)
    t0 = time.perf_counter()
    report, _ = run_comparison(ExperimentConfig(spec, replications=50, master_seed=4))
    ratios = [e.measured_ratio for e in report.entries]
    passed = all(abs(r - 1) <= 0.15 for r in ratios)
    ok = acceptance(4, "full precision, Var(w)=1/K, no BN: ratio within 15% of 1", passed,
                    "ratios " + ", ".join(f"{r:.4f}" for r in ratios), time.perf_counter() - t0, 120)
    assert ok


def test_05_binary_explosion(acceptance, tmp_path):
    t0 = time.perf_counter()
    spec = NetworkSpec([256] * 7, quant_mode="binary", sign_activations=True, batch_size=64)
    stats = run_experiment(ExperimentConfig(spec, replications=50, master_seed=5)).stats
    slope = -log_variance_slope(stats)
    slope_ok = abs(slope / math.log(256) - 1) <= 0.10

    import json
    cfg = tmp_path / "deep.json"
    cfg.write_text(json.dumps({"widths": [256] * 141, "quant_mode": "binary", "batchnorm": False,
                               "batch_size": 16, "sign_activations": True, "replications": 2}))
    out = tmp_path / "deep.csv"
    code = main(["simulate", "--config", str(cfg), "--format", "csv", "--out", str(out)])
    rows = [l.split(",") for l in out.read_text().splitlines() if l and not l.startswith(("#", "layer"))]
    truncated = max(int(r[-1]) for r in rows)
    ok = acceptance(5, "binary without BN explodes by K per layer", slope_ok and code == 0 and truncated > 0,
                    f"|slope| {slope:.4f} vs log 256 = {math.log(256):.4f}; 140-layer truncated_count {truncated}",
                    time.perf_counter() - t0, 120)
    assert ok


def test_06_binary_batchnorm_correction(acceptance):
    report, secs = binary_bn_run(256)
    ratios = [e.measured_ratio for e in report.entries]
    passed = all(abs(r - 1) <= 0.15 for r in ratios)
    ok = acceptance(6, "binary with BN, K=256, B=256: ratio within 15% of 1", passed,
                    "ratios " + ", ".join(f"{r:.4f}" for r in ratios), secs, 300)
    assert ok


@pytest.mark.parametrize("mode", ["binary", "ternary"])
def test_07_width_ratio_law(acceptance, mode):
    t0 = time.perf_counter()
    spec = NetworkSpec([64, 128, 256], quant_mode=mode, batchnorm=True, sign_activations=True, batch_size=128)
    report, _ = run_comparison(ExperimentConfig(spec, replications=100, master_seed=7, tolerance=0.2))
    (entry,) = report.entries
    passed = entry.predicted_ratio == 4.0 and abs(entry.measured_ratio / 4.0 - 1) <= 0.2
    ok = acceptance(7, f"width-ratio law 64->128->256 ({mode})", passed,
                    f"measured {entry.measured_ratio:.4f} vs 4", time.perf_counter() - t0, 300)
    assert ok


def test_08_ternary_statistics(acceptance):
    t0 = time.perf_counter()
    spec = NetworkSpec([1024, 1024, 1024], quant_mode="ternary", init="uniform_he2")
    assert theory.ternary_threshold(1024) == pytest.approx(0.35 * math.sqrt(6 / 1024), rel=1e-15)
    var, zero = realized_ternary_stats(spec, RngStream(8))
    passed = abs(var - 0.65) <= 0.02 and abs(zero - 0.35) <= 0.02
    ok = acceptance(8, "ternary K=1024: Var 0.65 +- 0.02, zeros 0.35 +- 0.02", passed,
                    f"Var(w~) {var:.4f}, zero fraction {zero:.4f}", time.perf_counter() - t0, 10)
    assert ok


def test_09_batch_size_trend(acceptance):
    devs, total = [], 0.0
    for B in (16, 64, 256):
        report, secs = binary_bn_run(B)
        total += secs
        devs.append(float(np.mean([abs(e.measured_ratio - 1) for e in report.entries])))
    passed = devs[0] > devs[1] > devs[2]
    ok = acceptance(9, "mean |ratio - 1| shrinks over B = 16, 64, 256", passed,
                    "deviations " + ", ".join(f"{d:.4f}" for d in devs), total, 600)
    assert ok


def test_10_stabilization_factor(acceptance):
    t0 = time.perf_counter()
    Bs = [2**k for k in range(3, 11)]
    vals = [theory.stabilization_factor(1, B, 2) for B in Bs]
    passed = all(1 < v <= 1 + 3 / B for v, B in zip(vals, Bs))
    ok = acceptance(10, "stabilization factor in (1, 1 + 3/B]", passed,
                    f"B=8: {vals[0]:.5f}, B=1024: {vals[-1]:.7f}", time.perf_counter() - t0, 1)
    assert ok


def test_11_determinism(acceptance, tmp_path, monkeypatch):
    import json
    t0 = time.perf_counter()
    cfg = tmp_path / "det.json"
    cfg.write_text(json.dumps({"widths": [128, 128, 128, 128], "quant_mode": "ternary", "batchnorm": True,
                               "batch_size": 64, "sign_activations": True, "replications": 16, "seed": 11}))
    blobs = []
    for threads in ("1", "1", "4"):
        monkeypatch.setenv("QNORM_THREADS", threads)
        out = tmp_path / f"out{len(blobs)}.csv"
        assert main(["simulate", "--config", str(cfg), "--format", "csv", "--out", str(out)]) == 0
        blobs.append(out.read_bytes())
    passed = blobs[0] == blobs[1] == blobs[2]
    ok = acceptance(11, "simulate output byte-identical (2 runs, QNORM_THREADS 1 and 4)", passed,
                    f"{len(blobs[0])} bytes each", time.perf_counter() - t0, 120)
    assert ok
