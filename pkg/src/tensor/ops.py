"""
Forward kernels with their adjoints.

Every op takes an optional GradientTape; when one is given the op records a closure
computing input gradients from the output gradient. Activations are separate ops, so a
convolution followed by an activation reproduces conv-with-f exactly.

Convolutions are computed with a strided window view and one tensordot; the input
adjoint scatters back in kernel-major order (outer loop over kernel offsets), which
fixes the summation order so repeated runs agree bitwise.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.tensor.core import AXIS_NAMES, Tensor
from src.utils.errors import ConfigError, ShapeError

DEFAULT_LEAKY_SLOPE = 0.1
NORM_EPS = 1e-5


def _record(tape, op, inputs, out, backward_fn):
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_conv_input(x, params, spec, op):
    nd = spec.ndim
    if x.ndim != nd + 2:
        raise ShapeError(f"{op}: expected a {nd + 2}-D input [N, C, {', '.join(AXIS_NAMES[nd])}], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"{op}: input channel axis has {x.shape[1]}, weights expect {spec.in_channels}")
    params.check_conv(spec, op)
    return spec.output_extents(x.shape[2:], op)


def _conv_nd(x, params, spec, tape, op):
    out_extents = _check_conv_input(x, params, spec, op)
    nd = spec.ndim
    xa = x.data
    w = params.weights.data
    spatial = tuple(range(2, 2 + nd))
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in spec.padding)
    xp = np.pad(xa, pads) if any(spec.padding) else xa

    windows = sliding_window_view(xp, spec.kernel, axis=spatial)
    windows = windows[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in spec.stride)]
    # windows: [N, C, *out, *kernel]
    kernel_axes = tuple(range(2 + nd, 2 + 2 * nd))
    y = np.tensordot(windows, w, axes=((1,) + kernel_axes, (1,) + spatial))
    y = np.moveaxis(y, -1, 1)
    if params.bias is not None:
        y = y + params.bias.data.reshape((1, -1) + (1,) * nd)
    out = Tensor.wrap(np.ascontiguousarray(y, dtype=xa.dtype))

    def backward_fn(g):
        out_axes = (0,) + spatial
        grad_w = np.tensordot(g, windows, axes=(out_axes, out_axes)).astype(w.dtype, copy=False)
        grad_b = g.sum(axis=out_axes) if params.bias is not None else None
        cols = np.tensordot(g, w, axes=((1,), (0,)))  # [N, *out, C, *kernel]
        grad_xp = np.zeros(xp.shape, dtype=xa.dtype)
        for offset in np.ndindex(*spec.kernel):
            target = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, spec.stride, out_extents)
            )
            grad_xp[target] += np.moveaxis(cols[(Ellipsis,) + offset], -1, 1)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(spec.padding, xa.shape[2:]))
        grads = [grad_xp[crop], grad_w]
        if params.bias is not None:
            grads.append(grad_b)
        return tuple(grads)

    inputs = [x, params.weights] + ([params.bias] if params.bias is not None else [])
    return _record(tape, op, inputs, out, backward_fn)


def conv3d_forward(x, params, spec, tape=None):
    """
    3D convolution over [N, C, T, H, W].

    Each output element is the sum over input channels m and kernel offsets (p, q, r) of
    w[j, m, p, q, r] * x[m, t+p, y+q, x+r] plus bias[j]. No activation is applied.
    """
    if spec.ndim != 3:
        raise ShapeError(f"conv3d: spec has a {spec.ndim}-D kernel {spec.kernel}")
    return _conv_nd(x, params, spec, tape, "conv3d")


def conv2d_forward(x, params, spec, tape=None):
    """2D convolution over [N, C, H, W]; the 2-axis case of conv3d_forward."""
    if spec.ndim != 2:
        raise ShapeError(f"conv2d: spec has a {spec.ndim}-D kernel {spec.kernel}")
    return _conv_nd(x, params, spec, tape, "conv2d")


def maxpool2d(x, window=2, stride=2, tape=None):
    """Non-overlapping max pooling over the two trailing axes. Odd extents are a config error."""
    if window != stride:
        raise ConfigError(f"maxpool2d: only non-overlapping pooling is supported (window {window}, stride {stride})")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected [N, C, H, W], got shape {x.shape}")
    n, c, h, w = x.shape
    for name, size in (("height", h), ("width", w)):
        if size % window:
            raise ConfigError(f"maxpool2d: {name} axis extent {size} is not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = blocks.argmax(axis=-1)
    out = Tensor.wrap(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def backward_fn(g):
        grad_blocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(grad_blocks, arg[..., None], g[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return _record(tape, "maxpool2d", [x], out, backward_fn)


def leaky_relu(x, slope=DEFAULT_LEAKY_SLOPE, tape=None):
    xa = x.data
    positive = xa >= 0
    out = Tensor.wrap(np.where(positive, xa, xa * xa.dtype.type(slope)))

    def backward_fn(g):
        return (np.where(positive, g, g * g.dtype.type(slope)),)

    return _record(tape, "leaky_relu", [x], out, backward_fn)


def logistic(x, tape=None):
    """Logistic function, clamped so the output stays strictly inside (0, 1) in the input precision."""
    info = np.finfo(x.dtype)
    y = np.clip(expit(x.data), info.tiny, 1 - info.epsneg).astype(x.dtype, copy=False)
    out = Tensor.wrap(y)

    def backward_fn(g):
        return (g * y * (1 - y),)

    return _record(tape, "logistic", [x], out, backward_fn)


def channel_norm(x, params, mode="train", momentum=0.1, eps=NORM_EPS, tape=None):
    """
    Per-channel normalization over every axis except the channel axis (axis 1).

    Train mode normalizes by batch statistics and returns params with updated running
    statistics; infer mode uses the running statistics and returns params unchanged.

    Returns:
        tuple: (Tensor, LayerParams)
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"channel_norm: mode must be 'train' or 'infer', got {mode!r}")
    xa = x.data
    channels = xa.shape[1]
    if params.scale.shape != (channels,):
        raise ShapeError(f"channel_norm: channel axis has {channels}, scale has {params.scale.shape[0]}")
    axes = (0,) + tuple(range(2, xa.ndim))
    bshape = (1, -1) + (1,) * (xa.ndim - 2)
    scale = params.scale.data.reshape(bshape)
    shift = params.shift.data.reshape(bshape)
    dtype = xa.dtype

    if mode == "train":
        count = xa.size // channels
        mean = xa.mean(axis=axes)
        var = xa.var(axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
        xhat = (xa - mean.reshape(bshape)) * inv_std.reshape(bshape)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        m = dtype.type(momentum)
        new_params = params.replace(
            running_mean=Tensor.wrap(((1 - m) * params.running_mean.data + m * mean).astype(dtype)),
            running_var=Tensor.wrap(((1 - m) * params.running_var.data + m * unbiased).astype(dtype)),
        )
    else:
        count = None
        inv_std = (1.0 / np.sqrt(params.running_var.data + eps)).astype(dtype)
        xhat = (xa - params.running_mean.data.reshape(bshape)) * inv_std.reshape(bshape)
        new_params = params

    out = Tensor.wrap((scale * xhat + shift).astype(dtype, copy=False))

    def backward_fn(g):
        grad_scale = (g * xhat).sum(axis=axes)
        grad_shift = g.sum(axis=axes)
        dxhat = g * scale
        if mode == "train":
            sum_dxhat = dxhat.sum(axis=axes).reshape(bshape)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            grad_x = (inv_std.reshape(bshape) / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        else:
            grad_x = dxhat * inv_std.reshape(bshape)
        return grad_x.astype(dtype, copy=False), grad_scale, grad_shift

    _record(tape, "channel_norm", [x, params.scale, params.shift], out, backward_fn)
    return out, new_params


def reshape(x, shape, tape=None):
    original = x.shape
    out = Tensor.wrap(x.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(original),)

    return _record(tape, "reshape", [x], out, backward_fn)


def permute(x, axes, tape=None):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor.wrap(np.ascontiguousarray(x.data.transpose(axes)))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(tape, "permute", [x], out, backward_fn)


def select(x, axis, index, tape=None):
    """Takes one slice along an axis and drops that axis."""
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"select: index {index} outside axis {axis} of extent {x.shape[axis]}")
    out = Tensor.wrap(np.ascontiguousarray(np.take(x.data, index, axis=axis)))

    def backward_fn(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _record(tape, "select", [x], out, backward_fn)
