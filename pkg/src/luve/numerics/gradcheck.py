"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from luve.numerics.tensor import Tensor, backward, no_grad


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(f(xt))
    return xt.grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / (|analytic| + 1e-8)``.

    ``f`` maps a float64 tensor to a scalar tensor and must be deterministic.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ana = analytic_gradient(f, x)
    num = numerical_gradient(f, x, step)
    return float(np.max(np.abs(ana - num) / (np.abs(ana) + 1e-8)))


def param_finite_diff_check(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                            max_coords: int | None = None, rng=None) -> float:
    """Same error measure, taken with respect to a module parameter in place.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    When ``max_coords`` is given only that many coordinates (chosen by ``rng``)
    are probed numerically.
    """
    param.grad = None
    backward(loss_fn())
    ana = param.grad.reshape(-1).copy()
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(rng.permutation(flat.size)[:max_coords])
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(ana[i] - num) / (abs(ana[i]) + 1e-8))
    param.grad = None
    return float(worst)
