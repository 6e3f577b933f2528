"""Shared test utilities: finite-difference oracles and small builders."""

import numpy as np

from sublab.tensor import Tensor, backward

FD_STEP = 1e-5


def fd_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


def grad_of(build, inputs: list) -> list:
    """Analytic gradients of a scalar graph wrt each input tensor.

    ``build`` maps the list of Tensors to a scalar Tensor.
    """
    out = build(inputs)
    backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def check_grads(build, arrays: list, h: float = FD_STEP, floor: float = 1e-6) -> float:
    """Compare analytic and finite-difference gradients; return worst rel err."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad_of(build, tensors)
    worst = 0.0
    for k in range(len(arrays)):
        def scalar(perturbed, k=k):
            local = [Tensor(a, requires_grad=False) for a in arrays]
            local[k] = Tensor(perturbed, requires_grad=False)
            return float(build(local).data)

        fd = fd_grad(scalar, arrays[k].copy(), h=h)
        worst = max(worst, max_rel_err(analytic[k], fd, floor=floor))
    return worst
