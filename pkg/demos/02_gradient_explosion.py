"""
Gradient explosion in binary networks, and the BatchNorm fix
============================================================

With sign weights the weight variance is 1 whatever the layer width, so
without BatchNorm each layer back multiplies the gradient variance by the
width K. BatchNorm divides by the pre-activation standard deviation, which
brings the per-layer factor back to about 1.
"""
# %%
from qnorm import ExperimentConfig, NetworkSpec, run_comparison


def show(title, spec, reps=20):
    report, result = run_comparison(ExperimentConfig(spec, replications=reps, master_seed=0))
    print(title)
    print("  layer  measured ratio  predicted ratio")
    for e in report.entries:
        print(f"  {e.layer:5d}  {e.measured_ratio:14.4f}  {e.predicted_ratio:15.4f}")
    return result


# %%
K = 128
show("full precision, Var(w) = 1/K, no BatchNorm",
     NetworkSpec([K] * 5, init="uniform_fan1", batch_size=64))

# %%
show("binary weights, no BatchNorm",
     NetworkSpec([K] * 5, quant_mode="binary", sign_activations=True, batch_size=64))

# %%
show("binary weights with BatchNorm",
     NetworkSpec([K] * 5, quant_mode="binary", batchnorm=True, sign_activations=True, batch_size=64))

# %%
# Far enough down, the unnormalized binary gradient overflows float64. The
# harness records the layers it could measure and flags the rest.
deep = ExperimentConfig(NetworkSpec([K] * 160, quant_mode="binary", sign_activations=True, batch_size=8),
                        replications=2)
from qnorm import run_experiment  # noqa: E402

stats = run_experiment(deep).stats
cut = max(s.layer for s in stats.layers if s.truncated_count)
print(f"\n159-layer binary net: layers 1..{cut} truncated, "
      f"layer {cut + 1} variance {stats.var(cut + 1):.3e}")
