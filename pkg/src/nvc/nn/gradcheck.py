"""Central-difference gradient checking."""

from __future__ import annotations

import math

import numpy as np

from .core import Parameter


class NonFiniteLossError(ArithmeticError):
    pass


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(loss_and_grad, params: dict[str, Parameter], samples: int = 20,
                            epsilon: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grad()`` must return the scalar loss and leave d(loss)/d(param)
    in every ``Parameter.grad`` (zeroing them first is its job). ``samples``
    scalar coordinates are drawn uniformly over all parameter entries.
    Relative errors use ``max(|a|, |n|, 1e-6)`` as denominator so coordinates
    with a vanishing gradient are judged on absolute error.
    """
    loss = loss_and_grad()
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss}")
    analytic = {k: p.grad.copy() for k, p in params.items()}
    names = list(params)
    sizes = np.array([params[k].value.size for k in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[names[i]]
        idx = np.unravel_index(int(flat - offsets[i]), p.value.shape)
        orig = p.value[idx]
        p.value[idx] = orig + epsilon
        up = loss_and_grad()
        p.value[idx] = orig - epsilon
        down = loss_and_grad()
        p.value[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFiniteLossError(f"non-finite loss while perturbing {p.name}{idx}")
        numeric = (up - down) / (2.0 * epsilon)
        worst = max(worst, relative_error(float(analytic[names[i]][idx]), numeric))
    # leave gradients as the unperturbed analytic ones
    loss_and_grad()
    return worst


def check_function_gradient(f, grad_f, x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Worst relative error for a plain array function ``f(x) -> scalar``."""
    x = np.array(x, dtype=np.float64)
    g = grad_f(x)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + epsilon
        up = f(x)
        x[idx] = orig - epsilon
        down = f(x)
        x[idx] = orig
        worst = max(worst, relative_error(float(g[idx]), (up - down) / (2 * epsilon)))
    return worst
