"""Central finite-difference verification of the assembled network.

Builds a small 64-bit model, freezes its dropout mask, and compares the
analytic gradient of the training loss against (f(w+h) - f(w-h)) / 2h for
sampled entries of every parameter tensor.  The worst relative error of a
correct implementation sits near 1e-8; anything above 1e-4 means a broken
backward pass.
"""

from __future__ import annotations

import numpy as np

from .model import FULL_INPUT, NUM_SEGMENTS, SEGMENT_INPUT, SplitFaceModel

DEFAULT_TOLERANCE = 1e-4


def run_gradcheck(num_attributes: int = 3, width_scale: float = 1 / 32,
                  batch: int = 2, seed: int = 0, h: float = 1e-8,
                  samples_per_tensor: int = 1) -> tuple[float, dict[str, float]]:
    """Max relative gradient error over sampled entries of every tensor.

    Returns the worst error and a per-tensor map of worst errors.
    """
    model = SplitFaceModel(num_attributes=num_attributes,
                           width_scale=width_scale, seed=seed,
                           dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    model.priors = rng.uniform(0.2, 0.8, num_attributes)
    model.set_train_dropout(True)
    segments = rng.random((batch, NUM_SEGMENTS, 3, SEGMENT_INPUT,
                           SEGMENT_INPUT))
    faces = rng.random((batch, 3, FULL_INPUT, FULL_INPUT))
    labels = rng.integers(0, 2, size=(batch, num_attributes)).astype(np.float64)

    def loss_and_grads():
        result = model.forward_all(segments, faces, train=True)
        return model.loss_and_score_grads(result, labels)

    loss_and_grads()  # fixes the frozen dropout mask
    _, score_grads = loss_and_grads()
    model.backward(score_grads)
    analytic = {k: v.copy() for k, v in model.named_grads().items()}

    params = model.named_params()
    pick = np.random.default_rng(seed + 2)
    per_tensor: dict[str, float] = {}
    for name in sorted(params):
        flat = params[name].reshape(-1)
        count = min(samples_per_tensor, flat.size)
        indices = pick.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for j in indices:
            old = flat[j]
            flat[j] = old + h
            f_plus = loss_and_grads()[0]
            flat[j] = old - h
            f_minus = loss_and_grads()[0]
            flat[j] = old
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor
