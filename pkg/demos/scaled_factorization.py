# Scaling one factor of W1 W2 by a and the other by 1/a leaves the product alone
# but wrecks the conditioning of the loss.

import numpy as np

from dlrlock import analysis as an
from dlrlock.tensor import Rng

r = Rng(0)
d = 3
W1, W2, M = (r.normal((d, d), 0, d ** -0.5) for _ in range(3))
for a in (1.0, 10.0, 100.0):
    rep = an.hessian_report(W1, W2, W1 @ W2 + 1e-3 * M, a)
    print(f"a={a:5g}: kappa(H) {rep.condition:.3g}  lower bound {rep.bound:.3g}")

# training from both initializations
cfg = an.MatfacConfig(d=16, optimizers={"sgd": [1e-2, 1e-5], "adam": [1e-2]},
                      steps={"sgd": 3000, "adam": 1000}, seeds=(0,))
for rec in an.matfac_experiment(cfg):
    m = rec.meta
    print(f"{m['opt']:4s} lr={m['lr']:<6g} a={m['a']:<4g} diverged={rec.diverged!s:5s} "
          f"final/initial={m['final_loss'] / m['initial_loss']:.2e} steps-to-threshold={m['steps_to_threshold']}")
