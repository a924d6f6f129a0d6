# How much a DLR net has to store for training, compared to the SwiGLU block it replaces.
#
# The forward pass costs about the same (matched parameter budget), but training
# must keep 3d + 2r elements per layer per token, for every one of L layers.

from dlrlock import analysis as an
from dlrlock import blocks as bl

d, d_ff, r = 64, 256, 4
L = bl.depth_for_budget(bl.swiglu_budget(d, d_ff), d, r)
print(f"d={d} d_ff={d_ff} r={r} -> depth L={L}")

for mode in ("full", "frozen"):
    pred = an.predicted_activation_memory(d, r, L, mode, d_ff=d_ff)
    meas = an.measure_activation_memory(d, r, L, mode)
    print(f"{mode:6s}: predicted {pred.total:6d}  measured {meas['total']:6d}  per token")

print("swiglu block:", an.swiglu_activation_memory(d, d_ff), "per token")

# with checkpointing every sqrt(L) layers the forward keeps only segment boundaries;
# backward then recomputes one segment at a time
k = int(round(L ** 0.5))
full = an.measure_activation_memory(d, r, L, "full")
ck = an.measure_activation_memory(d, r, L, "full", checkpoint_interval=k)
print(f"stored after forward, without / with checkpointing (interval {k}): {full['peak']} / {ck['peak']}")

# the ratio of training memory at the sizes of a 0.6B-class model
print("kappa bound, d=1024 r=32 L=141 d_ff=3072:", an.kappa_bound(1024, 32, 141, 3072))
