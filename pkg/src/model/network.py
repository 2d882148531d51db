"""
The detector network: a per-frame 2D backbone with shared weights, a temporal fusion
stack (3D convolutions, or an equal-parameter 2D stack on the reference frame), and a
2D prediction head emitting K·(5+C) channels per grid cell.
"""
import dataclasses
import logging

import numpy as np

from src.geometry.boxes import DetectionBox, decode_grid, nms
from src.model.config import baseline_width, temporal_padding
from src.tensor.core import ConvSpec, GradientTape, LayerParams, Tensor
from src.tensor.ops import (channel_norm, conv2d_forward, conv3d_forward, leaky_relu, logistic,
                            maxpool2d, permute, reshape, select)
from src.utils.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LayerDef:
    name: str
    spec: ConvSpec
    norm: bool
    activate: bool
    pool: bool = False


def _layer_defs(cfg):
    defs = []
    c_in = cfg.in_channels
    for i, block in enumerate(cfg.backbone):
        spec = ConvSpec((block.kernel, block.kernel), c_in, block.channels, padding=block.kernel // 2)
        defs.append(LayerDef(f"backbone.{i}", spec, cfg.use_norm, True, block.pool))
        c_in = block.channels

    kernels = cfg.temporal_kernels
    if cfg.temporal_mode == "3d":
        for i, (kernel, t_pad) in enumerate(zip(kernels, temporal_padding(kernels))):
            spec = ConvSpec(kernel, c_in, cfg.temporal_width, padding=(t_pad, kernel[1] // 2, kernel[2] // 2))
            defs.append(LayerDef(f"temporal.{i}", spec, cfg.use_norm, True))
            c_in = cfg.temporal_width
    else:
        width = baseline_width(cfg)
        for i, kernel in enumerate(kernels):
            c_out = cfg.temporal_width if i == len(kernels) - 1 else width
            spec = ConvSpec(kernel[1:], c_in, c_out, padding=(kernel[1] // 2, kernel[2] // 2))
            defs.append(LayerDef(f"temporal.{i}", spec, cfg.use_norm, True))
            c_in = c_out

    defs.append(LayerDef("head.0", ConvSpec((3, 3), c_in, cfg.head_width, padding=1), cfg.use_norm, True))
    defs.append(LayerDef("head.1", ConvSpec((3, 3), cfg.head_width, cfg.head_width, padding=1), cfg.use_norm, True))
    defs.append(LayerDef("head.out", ConvSpec((1, 1), cfg.head_width, cfg.output_channels), False, False))
    return defs


def _init_params(layer, rng, dtype):
    spec = layer.spec
    fan_in = spec.in_channels * int(np.prod(spec.kernel))
    bound = np.sqrt(2.0 / fan_in)
    weights = rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)
    c = spec.out_channels
    if layer.norm:
        return LayerParams(
            weights=Tensor.wrap(weights),
            scale=Tensor.wrap(np.ones(c, dtype=dtype)),
            shift=Tensor.wrap(np.zeros(c, dtype=dtype)),
            running_mean=Tensor.wrap(np.zeros(c, dtype=dtype)),
            running_var=Tensor.wrap(np.ones(c, dtype=dtype)),
        )
    return LayerParams(weights=Tensor.wrap(weights), bias=Tensor.wrap(np.zeros(c, dtype=dtype)))


class DetNet:
    """
    Layer definitions plus their parameters.

    Parameters live in a mutable name -> LayerParams mapping; the Tensors inside are
    immutable, so updating the model swaps whole Tensors.
    """

    def __init__(self, cfg, layers, params, seed=None):
        self.cfg = cfg
        self.layers = layers
        self.params = params
        self.seed = seed
        self.anchors = cfg.anchor_set()

    def parameters(self):
        """Ordered 'layer.field' -> Tensor mapping of trainable tensors."""
        named = {}
        for layer in self.layers:
            for field, tensor in self.params[layer.name].trainable():
                named[f"{layer.name}.{field}"] = tensor
        return named

    def state(self):
        """Every tensor including running statistics, in layer order."""
        named = {}
        for layer in self.layers:
            p = self.params[layer.name]
            for field in ("weights", "bias", "scale", "shift", "running_mean", "running_var"):
                tensor = getattr(p, field)
                if tensor is not None:
                    named[f"{layer.name}.{field}"] = tensor
        return named

    def update(self, named):
        """Swaps in new tensors (or arrays) by 'layer.field' name."""
        changes = {}
        for key, value in named.items():
            layer_name, field = key.rsplit(".", 1)
            if layer_name not in self.params:
                raise KeyError(f"unknown layer {layer_name!r}")
            tensor = value if isinstance(value, Tensor) else Tensor.wrap(np.array(value))
            changes.setdefault(layer_name, {})[field] = tensor
        for layer_name, fields in changes.items():
            self.params[layer_name] = self.params[layer_name].replace(**fields)

    def copy(self):
        return DetNet(self.cfg, self.layers, dict(self.params), self.seed)

    def astype(self, dtype):
        model = self.copy()
        model.update({k: t.astype(dtype) for k, t in self.state().items()})
        return model

    @property
    def dtype(self):
        return self.params[self.layers[0].name].weights.dtype

    def __repr__(self):
        return f"DetNet(mode={self.cfg.temporal_mode}, layers={len(self.layers)}, params={sum(t.size for t in self.parameters().values())})"


def build_model(cfg, seed=0, dtype=np.float32):
    """
    Builds a randomly initialised network (uniform weights in ±sqrt(2/fan_in), zero biases, unit norm scales).

    The same cfg and seed always give bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    layers = _layer_defs(cfg)
    params = {layer.name: _init_params(layer, rng, dtype) for layer in layers}
    model = DetNet(cfg, layers, params, seed)
    logger.debug("built %r", model)
    return model


def _apply(model, layer, x, mode, tape):
    p = model.params[layer.name]
    conv = conv3d_forward if layer.spec.ndim == 3 else conv2d_forward
    x = conv(x, p, layer.spec, tape=tape)
    if layer.norm:
        x, updated = channel_norm(x, p, mode=mode, tape=tape)
        if mode == "train":
            model.params[layer.name] = updated
    if layer.activate:
        if model.cfg.activation == "logistic":
            x = logistic(x, tape=tape)
        else:
            x = leaky_relu(x, tape=tape)
    if layer.pool:
        x = maxpool2d(x, tape=tape)
    return x


def _check_frames(model, frames):
    cfg = model.cfg
    if frames.ndim != 5:
        raise ShapeError(f"forward_sequence: expected frames [N, T, C, H, W], got shape {frames.shape}")
    _, t, c, h, w = frames.shape
    if t != cfg.frames:
        raise ShapeError(f"forward_sequence: time axis has {t} frames, model expects {cfg.frames}")
    if c != cfg.in_channels:
        raise ShapeError(f"forward_sequence: channel axis has {c}, model expects {cfg.in_channels}")
    for name, size in (("height", h), ("width", w)):
        if size % cfg.stride:
            raise ShapeError(f"forward_sequence: {name} axis extent {size} is not a multiple of stride {cfg.stride}")


def forward_sequence(model, frames, train=False):
    """
    Runs the network on a batch of frame stacks.

    Args:
        model (DetNet): The network. In train mode its running statistics are updated.
        frames: [N, T, C, H, W] Tensor or array.
        train (bool): Use batch statistics and record a GradientTape.

    Returns:
        tuple: (prediction grid Tensor [N, K*(5+C), H/stride, W/stride], tape or None)
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames), dtype=model.dtype)
    _check_frames(model, x)
    cfg = model.cfg
    tape = GradientTape() if train else None
    mode = "train" if train else "infer"
    n, t, c, h, w = x.shape
    backbone = [l for l in model.layers if l.name.startswith("backbone.")]
    temporal = [l for l in model.layers if l.name.startswith("temporal.")]
    head = [l for l in model.layers if l.name.startswith("head.")]

    if cfg.temporal_mode == "3d":
        x = reshape(x, (n * t, c, h, w), tape=tape)
        for layer in backbone:
            x = _apply(model, layer, x, mode, tape)
        _, fc, fh, fw = x.shape
        x = reshape(x, (n, t, fc, fh, fw), tape=tape)
        x = permute(x, (0, 2, 1, 3, 4), tape=tape)
        for layer in temporal:
            x = _apply(model, layer, x, mode, tape)
        x = select(x, 2, 0, tape=tape)
    else:
        x = select(x, 1, cfg.reference_index, tape=tape)
        for layer in backbone + temporal:
            x = _apply(model, layer, x, mode, tape)

    for layer in head:
        x = _apply(model, layer, x, mode, tape)
    return x, tape


def detections_from_grid(grid, anchors, stride, num_classes, score_thresh=0.5, nms_thresh=0.45):
    """Decodes every (cell, anchor) slot, keeps scores >= score_thresh and runs NMS per sample."""
    raw = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    boxes, obj, cls = decode_grid(raw, anchors.as_array(), stride, num_classes)
    class_ids = cls.argmax(axis=2)
    scores = obj * np.take_along_axis(cls, class_ids[:, :, None], axis=2)[:, :, 0]
    results = []
    for s in range(raw.shape[0]):
        keep = np.argwhere(scores[s] >= score_thresh)
        candidates = [
            DetectionBox(*(float(v) for v in boxes[s, a, row, col]), score=float(scores[s, a, row, col]),
                         class_id=int(class_ids[s, a, row, col]))
            for a, row, col in keep
        ]
        results.append(nms(candidates, nms_thresh, score_thresh))
    return results


def predict(model, frames, score_thresh=0.5, nms_thresh=0.45):
    """
    Detections for the reference frame of each stack.

    Returns:
        list: One list of DetectionBox per stack, in descending score order.
    """
    grid, _ = forward_sequence(model, frames, train=False)
    cfg = model.cfg
    return detections_from_grid(grid, model.anchors, cfg.stride, cfg.num_classes, score_thresh, nms_thresh)
