"""Central finite-difference checks of analytic gradients."""

import logging
from dataclasses import dataclass

import numpy as np

from scripts.autograd.tensor import Tensor

logger = logging.getLogger("GradCheck")


@dataclass
class GradCheckResult:
    name: str
    num_params: int
    max_abs_error: float
    relative_error: float
    tolerance: float

    @property
    def passed(self):
        return self.relative_error <= self.tolerance


def numerical_gradient(fn, arrays, h=1e-5):
    """d fn / d arrays[i] by central differences; `fn` maps a list of Tensors to a scalar Tensor."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, base in enumerate(arrays):
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for j in range(base.size):
            shifted = []
            for sign in (1.0, -1.0):
                moved = base.copy().reshape(-1)
                moved[j] += sign * h
                inputs = [Tensor(a) for a in arrays]
                inputs[i] = Tensor(moved.reshape(base.shape))
                shifted.append(fn(inputs).item())
            flat[j] = (shifted[0] - shifted[1]) / (2.0 * h)
        grads.append(grad)
    return grads


def gradcheck(fn, arrays, name="fn", h=1e-5, tol=1e-4):
    """Compare backward() against central differences.

    The relative error is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
    """
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    fn(inputs).backward()
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1) for t in inputs
    ])
    numeric = np.concatenate([g.reshape(-1) for g in numerical_gradient(fn, arrays, h)])
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    result = GradCheckResult(
        name=name,
        num_params=int(analytic.size),
        max_abs_error=float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0,
        relative_error=float(diff / scale),
        tolerance=tol,
    )
    level = logging.INFO if result.passed else logging.ERROR
    logger.log(level, f"{name}: {result.num_params} params, relative error {result.relative_error:.2e}")
    return result
