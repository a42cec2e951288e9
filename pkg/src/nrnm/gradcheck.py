"""Central finite-difference verification of tape gradients.

The relative-error denominator is floored at 1e-6 so near-zero gradient
pairs compare on an absolute scale instead of amplifying rounding noise.
Run in 64-bit; 32-bit finite differences are too coarse to be meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, set_strict_finite, zero_gradients

DEFAULT_EPS = 1e-5
REL_ERR_FLOOR = 1e-6


def finite_difference_grad(
    loss_fn: Callable[[], float], p: Tensor, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. every entry of ``p``.

    ``loss_fn`` must re-run the forward pass from the current parameter
    values; it is called with no tape active, so nothing is recorded.
    """
    flat = p.data.reshape(-1)
    grad = np.zeros_like(flat)
    # the probing loop re-runs the forward thousands of times; per-op
    # finiteness scans are pure overhead here and stay on everywhere else
    was_strict = set_strict_finite(False)
    try:
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = loss_fn()
            flat[i] = saved - eps
            f_minus = loss_fn()
            flat[i] = saved
            grad[i] = (f_plus - f_minus) / (2.0 * eps)
    finally:
        set_strict_finite(was_strict)
    return grad.reshape(p.data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    loss_builder: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = DEFAULT_EPS,
) -> dict[str, float]:
    """Max relative error per named parameter, analytic vs finite difference.

    ``loss_builder`` runs the forward pass and returns the scalar loss
    tensor; it is invoked once under a fresh tape for the analytic side and
    repeatedly tape-free for the numeric side.
    """
    zero_gradients(p for _, p in params)
    with GradTape() as tape:
        loss = loss_builder()
    tape.backward(loss)

    def loss_value() -> float:
        return loss_builder().item()

    report = {}
    for name, p in params:
        analytic = (
            p.grad if p.grad is not None else np.zeros_like(p.data)
        )
        numeric = finite_difference_grad(loss_value, p, eps)
        report[name] = max_relative_error(analytic, numeric)
    return report
