"""
Reverse-mode autodiff in a few lines
====================================

Build a small graph by hand, backpropagate, and compare the result with
central differences.  Everything runs in double precision so the two
estimates agree to roughly nine digits.
"""

import numpy as np

from mitransfer import functional as F
from mitransfer.gradcheck import check_gradients
from mitransfer.models import ModelSpec, build_model
from mitransfer.tensor import Tensor, precision

rng = np.random.default_rng(0)

with precision("double"):
    # a toy conv -> ELU -> average pool -> sum graph
    x = Tensor(rng.normal(size=(2, 1, 4, 12)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 1, 1, 5)), requires_grad=True)
    loss = F.pool2d(F.activation(F.conv2d(x, k), "elu"), "average", (1, 4), (1, 4)).sum()
    loss.backward()
    print("loss", round(loss.item(), 6))
    print("dL/dk[0] =", np.round(k.grad[0, 0, 0], 4))

    # same graph, checked against central differences
    err = check_gradients(
        lambda: F.pool2d(F.activation(F.conv2d(x, k), "elu"), "average", (1, 4), (1, 4)).sum(), [x, k]
    )
    print(f"worst relative error {err:.1e}")

# The same check works on a whole network.  A tiny EEGNet keeps the number
# of perturbed entries small; the dropout masks are reseeded on every call.
spec = ModelSpec("eegnet", n_channels=3, n_samples=32, temporal_kernel=5, separable_kernel=3,
                 f1=2, f2=3, eegnet_pools=(2, 2), precision="double")
model = build_model(spec)
X = rng.normal(size=(4, 3, 32))
y = np.array([0, 1, 0, 1])


def model_loss():
    model.reseed(0)
    return model.loss(X, y, training=True)[0]


with precision("double"):
    err = check_gradients(model_loss, model.parameters(), max_entries=10)
print(f"EEGNet end-to-end worst relative error {err:.1e}")
