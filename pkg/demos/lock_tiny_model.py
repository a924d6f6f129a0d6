# Lock a tiny byte-level transformer end to end and compare a training step before and after.
# Takes a minute or two on one CPU; the toy model in configs/lock.json is the real run.

import numpy as np

from dlrlock import bench
from dlrlock import lockpipe as lp
from dlrlock.datasets import byte_corpus, token_windows
from dlrlock.tensor import Rng
from dlrlock.training import LMTrainConfig

corpus = byte_corpus()
arch = {"d": 32, "n_layers": 2, "n_heads": 2, "d_ff": 128, "n_max": 64}
teacher, _ = lp.train_teacher(corpus, LMTrainConfig(steps=150, lr=3e-3, batch_size=8, seq_len=64), arch)
res = lp.lock_model(teacher, 4, corpus, lp.phase1_defaults(steps=300, seq_len=64),
                    lp.phase2_defaults(steps=40, seq_len=32, batch_size=4), collect_tokens=20000)

pt = lp.evaluate_perplexity(teacher, corpus.heldout)
pl = lp.evaluate_perplexity(res.model, corpus.heldout)
print(f"held-out perplexity: teacher {pt:.2f}, locked {pl:.2f}")
print("DLR depth per block:", [layer.ffn.L for layer in res.model.layers])

w = token_windows(corpus.train, 4, 64, Rng(0))
for name, m in (("teacher", teacher), ("locked", res.model)):
    inf = bench.time_step_split(m, w, "inference", steps=3, warmup=1)
    trn = bench.time_step_split(m, w, "train_full", steps=3, warmup=1)
    print(f"{name:8s} forward {np.median(inf.forward_s) * 1e3:6.1f} ms   "
          f"(backward+optimizer)/forward {trn.backward_forward_ratio:.2f}")
