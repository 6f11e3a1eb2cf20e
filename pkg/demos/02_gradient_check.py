# Numerical gradient verification
#
# Every layer in the network implements its own backward pass by hand, so
# the only way to trust training is to compare analytic gradients against
# central finite differences.  This script does it twice: first on a
# single convolution layer where the comparison is easy to read, then on
# the complete multi-branch network in 64-bit mode via the bundled
# gradcheck harness.

import numpy as np

from faceparts.gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from faceparts.nn.layers import Conv3x3

# Part 1: one conv layer.  Loss = sum of outputs, so the analytic gradient
# of the loss with respect to any weight is just the sum of that weight's
# backward contribution.

rng = np.random.default_rng(0)
conv = Conv3x3(2, 3, rng, dtype=np.float64)
x = rng.standard_normal((1, 2, 5, 5))

out = conv.forward(x, train=True)
conv.backward(np.ones_like(out))
analytic = conv.grads()["weight"]

h = 1e-6
numeric = np.zeros_like(conv.weight)
it = np.nditer(conv.weight, flags=["multi_index"])
for _ in it:
    idx = it.multi_index
    orig = conv.weight[idx]
    conv.weight[idx] = orig + h
    up = conv.forward(x).sum()
    conv.weight[idx] = orig - h
    down = conv.forward(x).sum()
    conv.weight[idx] = orig
    numeric[idx] = (up - down) / (2 * h)

worst = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0))
print(f"conv3x3 weight gradient: {conv.weight.size} entries, "
      f"worst relative error {worst:.2e}")
assert worst < 1e-8

# Part 2: the full network.  run_gradcheck builds a narrow (width 1/32)
# model in float64, probes one entry of every parameter tensor, and
# returns the worst relative error.  ReLU kinks make the step size
# matter: the default h = 1e-8 keeps kink crossings rare while staying
# above roundoff.

print()
print("checking the full network (a few hundred tensors, ~40 s)...")
worst, per_tensor = run_gradcheck()
print(f"tensors probed: {len(per_tensor)}")
print(f"worst relative error: {worst:.2e} (tolerance {DEFAULT_TOLERANCE:.0e})")

ranked = sorted(per_tensor.items(), key=lambda kv: -kv[1])[:5]
print("highest-error tensors:")
for name, err in ranked:
    print(f"  {name}: {err:.2e}")

assert worst < DEFAULT_TOLERANCE
print()
print("done")
