"""
Stack-consistent augmentation: one crop/flip decision and one HSV jitter per stack,
applied identically to every frame and mapped onto the reference boxes.
"""
import dataclasses

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from src.geometry.boxes import GroundTruthBox
from src.utils.errors import ConfigError

MIN_BOX_PX = 2.0


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    flip_prob: float = 0.5
    crop: bool = True
    crop_scale: tuple[float, float] = (0.75, 1.0)   # kept fraction of each side
    hsv: bool = True
    exposure: float = 1.5                          # gain drawn from [1/e, e]
    saturation: float = 1.5

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"AugmentConfig.flip_prob must be in [0, 1], got {self.flip_prob}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"AugmentConfig.crop_scale must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if self.exposure < 1 or self.saturation < 1:
            raise ConfigError("AugmentConfig.exposure and saturation must be >= 1")

    @classmethod
    def disabled(cls):
        return cls(flip=False, crop=False, hsv=False)


def hflip(frames, boxes):
    """Mirrors [T, C, H, W] frames left-right; each box center maps to cx' = W - cx."""
    width = frames.shape[-1]
    flipped = [GroundTruthBox(width - b.cx, b.cy, b.w, b.h, b.class_id) for b in boxes]
    return np.ascontiguousarray(frames[..., ::-1]), flipped


def crop_resize(frames, boxes, window):
    """
    Crops window = (x0, y0, cw, ch) from every frame and resizes it back to the full
    extent by nearest-neighbour sampling. Boxes are clipped to the window and rescaled;
    those narrower or shorter than 2 px afterwards are dropped.
    """
    _, _, height, width = frames.shape
    x0, y0, cw, ch = window
    cols = np.minimum(np.floor(x0 + (np.arange(width) + 0.5) * cw / width), width - 1).astype(int)
    rows = np.minimum(np.floor(y0 + (np.arange(height) + 0.5) * ch / height), height - 1).astype(int)
    out = frames[:, :, rows][:, :, :, cols]
    sx, sy = width / cw, height / ch
    kept = []
    for b in boxes:
        x1 = (max(b.cx - b.w / 2, x0) - x0) * sx
        x2 = (min(b.cx + b.w / 2, x0 + cw) - x0) * sx
        y1 = (max(b.cy - b.h / 2, y0) - y0) * sy
        y2 = (min(b.cy + b.h / 2, y0 + ch) - y0) * sy
        if x2 - x1 < MIN_BOX_PX or y2 - y1 < MIN_BOX_PX:
            continue
        kept.append(GroundTruthBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, b.class_id))
    return np.ascontiguousarray(out), kept


def hsv_jitter(frames, exposure_gain, saturation_gain):
    """Scales V (exposure) and S (saturation) of every frame by the same gains."""
    rgb = np.clip(np.moveaxis(frames, 1, -1), 0, 1)
    hsv = rgb_to_hsv(rgb)
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation_gain, 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] * exposure_gain, 0, 1)
    return np.ascontiguousarray(np.moveaxis(hsv_to_rgb(hsv), -1, 1).astype(frames.dtype))


def _gain(rng, limit):
    gain = rng.uniform(1.0, limit)
    return gain if rng.random() < 0.5 else 1.0 / gain


def augment(frames, boxes, rng, cfg):
    """
    Args:
        frames (np.ndarray): [T, C, H, W] stack.
        boxes (list): GroundTruthBox list of the reference frame.
        rng (np.random.Generator): Source of every random decision.
        cfg (AugmentConfig): Toggles and ranges.

    Returns:
        tuple: (frames', boxes')
    """
    frames = np.array(frames, copy=True)
    boxes = list(boxes)
    _, _, height, width = frames.shape
    if cfg.crop:
        scale = rng.uniform(*cfg.crop_scale)
        cw, ch = width * scale, height * scale
        window = (rng.uniform(0, width - cw), rng.uniform(0, height - ch), cw, ch)
        frames, boxes = crop_resize(frames, boxes, window)
    if cfg.flip and rng.random() < cfg.flip_prob:
        frames, boxes = hflip(frames, boxes)
    if cfg.hsv:
        frames = hsv_jitter(frames, _gain(rng, cfg.exposure), _gain(rng, cfg.saturation))
    return frames, boxes
