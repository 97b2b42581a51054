"""A tour of the autodiff core: build a small graph, backpropagate, and check it numerically."""
import numpy as np

from uegan import tensor as T
from uegan.losses import dice_loss

rng = np.random.default_rng(0)

# a one-layer segmentation head on a random feature map
feats = T.Tensor(rng.standard_normal((2, 4, 8, 8)))
w = T.Tensor(0.3 * rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
b = T.Tensor(np.zeros(1), requires_grad=True)
gt = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float32)

prob = T.sigmoid(T.conv2d(feats, w, b, padding=1))
loss = dice_loss(prob, gt)
loss.backward()
print(f"dice loss {float(loss.data):.4f}")
print(f"weight gradient norm {np.linalg.norm(w.grad):.4f}, bias gradient {b.grad}")

# the same function checked against central differences in float64
res = T.grad_check(lambda w, b: dice_loss(T.sigmoid(T.conv2d(feats, w, b, padding=1)), gt), [w, b])
print(f"finite-difference check: max relative error {res['max_rel_err']:.2e}, passed={res['passed']}")

# bilinear interpolation weights sum to one, so a 2x upsample of a 3x3 map passes 36 units of gradient back
x = T.Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
T.bilinear_upsample(x, 2).sum().backward()
print("upsample gradient per input pixel:")
print(x.grad[0, 0])
print(f"total {x.grad.sum():.1f}")

# non-finite values are caught at the op that produced them
try:
    T.log(T.Tensor(np.array([-1.0])))
except Exception as exc:
    print(f"{type(exc).__name__}: {exc}")
