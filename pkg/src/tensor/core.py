"""
Core value types of the tensor layer: Tensor, ConvSpec, LayerParams, SgdConfig and
the GradientTape with its reverse traversal.

Layout convention for every activation tensor is [batch, channel, (time,) height, width],
row-major. Tensors are immutable once constructed: the backing numpy array is flagged
read-only and every operation returns a new Tensor.
"""
import dataclasses
import itertools

import numpy as np

from src.utils.errors import ConfigError, ShapeError

_uid_counter = itertools.count(1)

AXIS_NAMES = {
    2: ("height", "width"),
    3: ("time", "height", "width"),
}


class Tensor:
    """
    Dense N-dimensional array of 32-bit (or, in check mode, 64-bit) reals.

    Args:
        data: Anything numpy can turn into an array.
        dtype: Optional numpy dtype. Non-float input defaults to float32; float numpy
            arrays keep their precision.
        name (str, optional): Label used by parameter dictionaries and error messages.
    """
    __slots__ = ("_array", "uid", "name")

    def __init__(self, data, dtype=None, name=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float32
        array = np.array(data, dtype=dtype, copy=True)
        self._init(array, name)

    def _init(self, array, name):
        if array.ndim == 0:
            array = array.reshape(1)
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"Tensor extents must all be >= 1, got {array.shape}")
        array.flags.writeable = False
        self._array = array
        self.uid = next(_uid_counter)
        self.name = name

    @classmethod
    def wrap(cls, array, name=None):
        """Adopts a freshly computed array without copying it. The caller must not keep a writable alias."""
        obj = cls.__new__(cls)
        obj._init(np.asarray(array), name)
        return obj

    @classmethod
    def zeros(cls, shape, dtype=np.float32, name=None):
        return cls.wrap(np.zeros(shape, dtype=dtype), name=name)

    @property
    def data(self):
        return self._array

    @property
    def shape(self):
        return self._array.shape

    @property
    def dtype(self):
        return self._array.dtype

    @property
    def size(self):
        return self._array.size

    @property
    def ndim(self):
        return self._array.ndim

    def numpy(self):
        return self._array.copy()

    def astype(self, dtype):
        return Tensor.wrap(self._array.astype(dtype), name=self.name)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def _as_tuple(value, n, field_name):
    if isinstance(value, int):
        return (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ConfigError(f"ConvSpec.{field_name} needs {n} entries, got {len(value)}")
    return value


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D or 3D convolution. Kernel extents are literal (a 3x3x3 kernel sums offsets 0..2)."""
    kernel: tuple
    in_channels: int
    out_channels: int
    stride: tuple = 1
    padding: tuple = 0

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel)
        if len(kernel) not in AXIS_NAMES:
            raise ConfigError(f"ConvSpec.kernel must have 2 or 3 extents, got {kernel}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", _as_tuple(self.stride, len(kernel), "stride"))
        object.__setattr__(self, "padding", _as_tuple(self.padding, len(kernel), "padding"))
        if any(k < 1 for k in kernel):
            raise ConfigError(f"ConvSpec.kernel extents must be positive, got {kernel}")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"ConvSpec.stride must be positive, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ConfigError(f"ConvSpec.padding must be non-negative, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("ConvSpec channel counts must be positive")

    @property
    def ndim(self):
        return len(self.kernel)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, input_extents, op="conv"):
        """Applies (in + 2*pad - kernel)/stride + 1 per axis; the result must be an integer >= 1."""
        names = AXIS_NAMES[self.ndim]
        out = []
        for name, size, k, s, p in zip(names, input_extents, self.kernel, self.stride, self.padding):
            span = size + 2 * p - k
            if span < 0 or span % s:
                raise ShapeError(
                    f"{op}: {name} axis of extent {size} with kernel {k}, stride {s}, padding {p} "
                    f"does not give an integer output extent >= 1"
                )
            out.append(span // s + 1)
        return tuple(out)


@dataclasses.dataclass
class LayerParams:
    """
    Trainable state of one layer.

    Convolution layers use weights/bias; normalization layers use scale/shift plus the
    non-trainable running statistics.
    """
    weights: Tensor = None
    bias: Tensor = None
    scale: Tensor = None
    shift: Tensor = None
    running_mean: Tensor = None
    running_var: Tensor = None

    def __post_init__(self):
        if self.running_var is not None and not np.all(self.running_var.data > 0):
            raise ConfigError("LayerParams.running_var entries must be > 0")

    def check_conv(self, spec, op="conv"):
        if self.weights is None:
            raise ShapeError(f"{op}: layer has no weight tensor")
        if tuple(self.weights.shape) != spec.weight_shape:
            raise ShapeError(f"{op}: weight shape {self.weights.shape} does not match spec {spec.weight_shape}")
        if self.bias is not None and tuple(self.bias.shape) != (spec.out_channels,):
            raise ShapeError(f"{op}: bias shape {self.bias.shape} does not match {spec.out_channels} output channels")

    def trainable(self):
        """Ordered (field, Tensor) pairs that receive gradients."""
        return [(f, getattr(self, f)) for f in ("weights", "bias", "scale", "shift") if getattr(self, f) is not None]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"SgdConfig.learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"SgdConfig.momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"SgdConfig.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"SgdConfig.batch_size must be >= 1, got {self.batch_size}")


@dataclasses.dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: object  # callable: output grad -> tuple of input grads (None where not needed)


class GradientTape:
    """Ordered record of executed operations; backward() replays it in exact reverse order."""

    def __init__(self):
        self.entries = []

    def record(self, op, inputs, output, backward_fn):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))
        return output

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


class Gradients:
    """Gradient arrays keyed by tensor identity."""

    def __init__(self, arrays):
        self._arrays = arrays

    def wrt(self, tensor):
        return self._arrays[tensor.uid]

    def __contains__(self, tensor):
        return tensor.uid in self._arrays

    def named(self, tensors):
        """Maps a name -> Tensor dictionary onto name -> gradient array."""
        return {name: self._arrays[t.uid] for name, t in tensors.items()}


def backward(tape, loss_grad, output=None):
    """
    Reverse-mode traversal of a tape.

    Args:
        tape (GradientTape): Operations recorded during the forward pass.
        loss_grad: d(loss)/d(output), same shape as the output.
        output (Tensor, optional): Tensor the loss gradient refers to. Defaults to the
            output of the last recorded operation.

    Returns:
        Gradients: one array for every tensor that entered a recorded operation,
        zero-filled for tensors the loss does not depend on.
    """
    if not tape.entries:
        raise ShapeError("backward: tape is empty")
    if output is None:
        output = tape.entries[-1].output
    seed = np.asarray(as_array(loss_grad), dtype=output.dtype)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: loss gradient shape {seed.shape} does not match output {output.shape}")

    grads = {output.uid: seed}
    for entry in reversed(tape.entries):
        out_grad = grads.get(entry.output.uid)
        if out_grad is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(out_grad)):
            if grad is None:
                continue
            previous = grads.get(tensor.uid)
            grads[tensor.uid] = grad if previous is None else previous + grad

    for entry in tape.entries:
        for tensor in entry.inputs:
            if tensor.uid not in grads:
                grads[tensor.uid] = np.zeros(tensor.shape, dtype=tensor.dtype)
    return Gradients(grads)
