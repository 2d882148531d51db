import numpy as np

from src.tensor.core import Tensor
from src.utils.errors import ShapeError


def sgd_step(params, grads, state, cfg):
    """
    One SGD update with momentum and L2 weight decay.

        v <- momentum * v + grad + weight_decay * θ
        θ <- θ - lr * v

    Args:
        params (dict): name -> Tensor.
        grads (dict): name -> gradient array, same shapes as params.
        state (dict or None): name -> velocity array from the previous step.
        cfg (SgdConfig): Hyperparameters.

    Returns:
        tuple: (new params dict of Tensors, new velocity dict)
    """
    state = state or {}
    dtype_cache = {}
    new_params, new_state = {}, {}
    for name, theta in params.items():
        grad = np.asarray(grads[name])
        if grad.shape != theta.shape:
            raise ShapeError(f"sgd_step: gradient for {name} has shape {grad.shape}, parameter has {theta.shape}")
        dtype = theta.dtype
        if dtype not in dtype_cache:
            dtype_cache[dtype] = (dtype.type(cfg.momentum), dtype.type(cfg.weight_decay), dtype.type(cfg.learning_rate))
        momentum, decay, lr = dtype_cache[dtype]
        velocity = state.get(name)
        if velocity is None:
            velocity = np.zeros(theta.shape, dtype=dtype)
        velocity = momentum * velocity + grad.astype(dtype, copy=False) + decay * theta.data
        new_state[name] = velocity
        new_params[name] = Tensor.wrap(theta.data - lr * velocity, name=theta.name)
    return new_params, new_state
