# Weight symmetries keep the function but move the weights, and simple
# canonicalization undoes them.

import numpy as np

from dlrlock import attacks as at
from dlrlock.datasets import synthetic_blobs
from dlrlock.tensor import Rng

data = synthetic_blobs(seed=0, n_train=1000, n_test=300)
theta, acc = at.train_mlp(data, hidden=64, steps=200)
print(f"base MLP test accuracy {acc:.3f}")

base = at.mlp_logits(theta, data.x_test)
for a in (0.1, 10.0, 100.0):
    t = at.scale_mlp(theta, a)
    f = at.mlp_logits(t, data.x_test)
    moved = np.linalg.norm(t["W2"] - theta["W2"]) / np.linalg.norm(theta["W2"])
    print(f"a={a:6g}: logits rel change {np.linalg.norm(f - base) / np.linalg.norm(base):.1e}, "
          f"W2 moved by {moved:.1f}x its norm")

# an invertible matrix between the layers is erased by the SVD rebalance (ReLU aside)
W1, W2 = theta["W1"], theta["W2"]
u0, v0 = at.svd_rebalance(W2, W1)
A = at.random_invertible(W1.shape[0], Rng(1), 1e3)
W2a, W1a = at.insert_invertible(W1, W2, A)
u, v = at.svd_rebalance(W2a, W1a)
print("rebalanced factors after insertion, max abs diff:", max(np.abs(u - u0).max(), np.abs(v - v0).max()))
