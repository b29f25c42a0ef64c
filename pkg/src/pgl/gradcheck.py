"""Central finite-difference check of tape gradients."""
import numpy as np

from .autodiff import backward


def finite_difference_check(fn, params, epsilon=1e-4, names=None):
    """Worst entrywise relative error between tape and numeric gradients.

    ``fn(params)`` must return a scalar Tensor and be deterministic. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    names = list(params) if names is None else list(names)
    params.zero_grad()
    loss = fn(params)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("fn returned a non-finite value")
    backward(loss)
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                    else np.zeros_like(params[n].data)) for n in names}
    params.zero_grad()

    worst = 0.0
    for n in names:
        p = params[n]
        flat = p.data.reshape(-1)
        a_flat = analytic[n].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn(params).item()
            flat[i] = orig - epsilon
            down = fn(params).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite fn value perturbing {n}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
