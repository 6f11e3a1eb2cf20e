"""Central-difference validation of analytic gradients.

The check builds (or accepts) a float64 network, evaluates a scalar
projection of its output, and compares every parameter's analytic gradient
against (f(p+h) - f(p-h)) / 2h entry by entry.  Inputs are redrawn until no
ReLU pre-activation sits near its kink, where finite differences are
meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ToleranceExceeded
from .layers import ReLU
from .network import Network, NetworkSpec

KINK_MARGIN = 1e-4
MAX_REDRAWS = 20


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _relative(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def gradient_check(
    network: NetworkSpec | Network,
    x: np.ndarray | None = None,
    tolerance: float = 1e-4,
    seed: int = 0,
    h: float = 1e-5,
    batch: int = 2,
    check_input: bool = True,
) -> GradCheckReport:
    """Validate every parameter gradient of ``network``; raise on failure.

    Raises ToleranceExceeded naming the worst parameter when the maximum
    relative error exceeds ``tolerance``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(network, NetworkSpec):
        net = Network.build(network, rng, dtype=np.float64)
    else:
        net = network
        if net.dtype != np.float64:
            raise ValueError("gradient checks require a float64 network")

    if x is None:
        if net.spec.in_hw is None:
            shape = (batch, net.spec.in_channels)
        else:
            shape = (batch, net.spec.in_channels, *net.spec.in_hw)
        x = rng.standard_normal(shape)
    x = x.astype(np.float64)

    relus = [l for l in net.layers if isinstance(l, ReLU)]
    net.set_dropout_frozen(True)
    for _ in range(MAX_REDRAWS):
        net.forward(x, train=True)
        if all(r.last_min_abs is None or r.last_min_abs > KINK_MARGIN
               for r in relus):
            break
        x = rng.standard_normal(x.shape)

    out = net.forward(x, train=True)
    projection = rng.standard_normal(out.shape)

    def objective(inp: np.ndarray) -> float:
        return float(np.sum(net.forward(inp, train=True) * projection))

    # Analytic pass.
    net.forward(x, train=True)
    d_input = net.backward(projection)
    analytic = {k: v.copy() for k, v in net.named_grads().items()}
    if check_input:
        analytic["input"] = d_input.copy()

    per_param: dict[str, float] = {}
    params = dict(net.named_params())
    if check_input:
        params["input"] = x
    for name, arr in params.items():
        worst = 0.0
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = objective(x)
            flat[i] = orig - h
            f_minus = objective(x)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _relative(float(gflat[i]), numeric))
        per_param[name] = worst

    net.set_dropout_frozen(False)
    worst_param = max(per_param, key=per_param.get)
    report = GradCheckReport(
        max_rel_error=per_param[worst_param],
        worst_param=worst_param,
        per_param=per_param,
        tolerance=tolerance,
    )
    if not report.passed:
        raise ToleranceExceeded(worst_param, report.max_rel_error, tolerance)
    return report
