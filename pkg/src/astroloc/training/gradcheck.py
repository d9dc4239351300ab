import numpy as np


def grad_check(loss_fn, point, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max entrywise relative error between analytic and central-difference gradients.

    ``loss_fn(x)`` must return ``(loss, grad)`` with ``grad`` shaped like ``x``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    _, analytic = loss_fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + eps
        up, _ = loss_fn(x.copy())
        flat[j] = keep - eps
        down, _ = loss_fn(x.copy())
        flat[j] = keep
        num_flat[j] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())
