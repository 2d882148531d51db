import logging

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FLOOR = 1e-3


def relative_error(analytic, numeric, floor=DEFAULT_FLOOR):
    """|a - n| / max(|a|, |n|, floor); the floor judges vanishing gradients absolutely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(f, params, epsilon=1e-4, max_coords=20, seed=0, floor=DEFAULT_FLOOR):
    """
    Compares analytic gradients with central finite differences in 64-bit precision.

    Args:
        f (callable): Maps a name -> float64 array dictionary to (value, grads), where
            grads is a name -> array dictionary of analytic gradients.
        params (dict): name -> array (or Tensor) starting point.
        epsilon (float): Perturbation for (f(θ+ε) - f(θ-ε)) / 2ε.
        max_coords (int): Coordinates sampled per tensor; smaller tensors are checked fully.
        seed (int): Seed of the coordinate sampler.

    Returns:
        float: Maximum relative error over all checked coordinates.
    """
    rng = np.random.default_rng(seed)
    base = {name: np.array(getattr(p, "data", p), dtype=np.float64) for name, p in params.items()}
    _, analytic = f(base)

    worst, worst_at = 0.0, None
    for name in sorted(base):
        values = base[name]
        size = values.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        grad = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for flat_index in coords:
            probe = dict(base)
            shifted = values.copy().reshape(-1)
            shifted[flat_index] += epsilon
            probe[name] = shifted.reshape(values.shape)
            plus, _ = f(probe)
            shifted[flat_index] -= 2 * epsilon
            probe[name] = shifted.reshape(values.shape)
            minus, _ = f(probe)
            numeric = (float(plus) - float(minus)) / (2 * epsilon)
            err = relative_error(float(grad[flat_index]), numeric, floor)
            if err > worst:
                worst, worst_at = err, (name, int(flat_index))

    logger.debug("finite_diff_check: max relative error %.3e at %s", worst, worst_at)
    return worst
