"""
Checking gradients across kinks
===============================

Central differences break down when a +h / -h stencil straddles a ReLU
hinge, a max-pool tie or an L1 sign change. The checker records every
such branch decision during the forward pass and throws away stencils
whose two sides disagree, so what remains measures the gradient code
rather than the non-smoothness.
"""

import numpy as np

from fsgfa import losses as L
from fsgfa import networks as N
from fsgfa.nncore import DEFAULT_DTYPE, Tensor, check_gradients, check_many, ops

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True, dtype=np.float64)
coef = rng.normal(size=(2, 4, 3, 3))
err = check_gradients(lambda: ops.sum(ops.mul(ops.maxpool2d(ops.relu(ops.conv2d(x, w, 1, 1))), coef)), [x, w])
print(f"conv -> relu -> maxpool, relative error {err:.1e}")

# %%
# The same check through the whole desk model: all three losses at once,
# in float64, on random inputs. One random entry of every parameter tensor
# is probed, and the worst error is reported per loss.

b = N.build(N.DESK, 0).astype(np.float64)
xr = rng.uniform(-1, 1, (2, 3, 112, 112))
prior = rng.uniform(0, 1, (2, 3, 28, 28))
target = rng.uniform(-1, 1, (2, 3, 56, 56))
labels = rng.integers(0, 20, 2)


def losses():
    o = N.forward_train(b, Tensor(xr), Tensor(prior))
    return [L.cls_loss(o["logits"], labels), L.pixel_align_loss(target, o["x_recon"]),
            L.feature_align_loss(o["g_agg"], o["g_emb"])]


errs = check_many(losses, b.parameters(), h=1e-6)
for name, e in zip(("classification", "pixel alignment", "feature alignment"), errs):
    print(f"{name:>18s}: worst relative error {e:.1e}")
print("training runs in", np.dtype(DEFAULT_DTYPE).name)
