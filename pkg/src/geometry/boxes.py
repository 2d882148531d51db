"""
Box types and box arithmetic: IoU, the cell-relative decode/encode pair and greedy NMS.

Boxes are stored center-format (cx, cy, w, h). Corner format is only used internally
for overlap computation.
"""
import dataclasses

import numpy as np
from scipy.special import expit, logit

from src.utils.errors import ConfigError

OFFSET_CLAMP = 1e-4


@dataclasses.dataclass(frozen=True)
class DetectionBox:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"DetectionBox extents must be positive, got w={self.w}, h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ConfigError(f"DetectionBox score must be in [0, 1], got {self.score}")

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h,
                "score": self.score, "class": self.class_id}


@dataclasses.dataclass(frozen=True)
class GroundTruthBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"GroundTruthBox extents must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self):
        return self.w * self.h

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "class": self.class_id}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["cx"]), float(data["cy"]), float(data["w"]), float(data["h"]),
                   int(data.get("class", 0)))


@dataclasses.dataclass(frozen=True)
class RawPrediction:
    t_x: float
    t_y: float
    t_w: float
    t_h: float
    t_o: float
    cell: tuple = (0, 0)
    anchor_index: int = 0


def _extents(box):
    if isinstance(box, (tuple, list, np.ndarray)):
        return tuple(float(v) for v in box[:4])
    return box.cx, box.cy, box.w, box.h


def _prior_extents(prior):
    if isinstance(prior, (tuple, list, np.ndarray)):
        return float(prior[0]), float(prior[1])
    return prior.p_w, prior.p_h


def to_corners(boxes):
    """(..., 4) center-format array -> (..., 4) [x1, y1, x2, y2]."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def from_corners(corners):
    corners = np.asarray(corners, dtype=np.float64)
    wh = corners[..., 2:4] - corners[..., 0:2]
    return np.concatenate([corners[..., 0:2] + wh / 2, wh], axis=-1)


def iou_matrix(a, b):
    """Pairwise IoU between (n, 4) and (m, 4) center-format arrays."""
    ca = to_corners(np.reshape(a, (-1, 4)))[:, None, :]
    cb = to_corners(np.reshape(b, (-1, 4)))[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou(a, b):
    """Intersection over union of two center-format boxes; 0 when disjoint."""
    return float(iou_matrix(_extents(a), _extents(b))[0, 0])


def shape_iou(w1, h1, w2, h2):
    """IoU of two boxes placed at a common center. Broadcasts over numpy inputs."""
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (np.multiply(w1, h1) + np.multiply(w2, h2) - inter)


def decode(raw, prior, stride=1.0):
    """
    Maps a raw cell-relative prediction to a pixel-space box.

        b_x = σ(t_x) + c_x,  b_y = σ(t_y) + c_y     (cells, then × stride)
        b_w = p_w · e^{t_w}, b_h = p_h · e^{t_h}    (priors in cell units, × stride)
        score = σ(t_o)
    """
    p_w, p_h = _prior_extents(prior)
    c_x, c_y = raw.cell
    return DetectionBox(
        cx=float((expit(raw.t_x) + c_x) * stride),
        cy=float((expit(raw.t_y) + c_y) * stride),
        w=float(p_w * np.exp(raw.t_w) * stride),
        h=float(p_h * np.exp(raw.t_h) * stride),
        score=float(expit(raw.t_o)),
    )


def encode(gt, cell, prior, stride=1.0):
    """
    Inverse of decode for the four coordinates.

    Boundary offsets are clamped to [1e-4, 1 - 1e-4] before the logit so centers lying
    exactly on a cell edge stay finite.

    Returns:
        tuple: (t_x, t_y, t_w, t_h)
    """
    cx, cy, w, h = _extents(gt)
    p_w, p_h = _prior_extents(prior)
    c_x, c_y = cell
    offsets = []
    for axis, value, c in (("x", cx, c_x), ("y", cy, c_y)):
        off = value / stride - c
        if off < -1e-9 or off > 1 + 1e-9:
            raise ValueError(f"encode: box center {axis}={value} lies outside cell {tuple(cell)} at stride {stride}")
        offsets.append(min(max(off, OFFSET_CLAMP), 1 - OFFSET_CLAMP))
    return (float(logit(offsets[0])), float(logit(offsets[1])),
            float(np.log(w / stride / p_w)), float(np.log(h / stride / p_h)))


def decode_grid(raw, priors, stride, num_classes):
    """
    Vectorised decode of a prediction grid.

    Args:
        raw (np.ndarray): [N, K*(5+C), H, W] head output, anchor-major channels.
        priors (np.ndarray): [K, 2] prior extents in cell units.
        stride (float): Pixels per cell.
        num_classes (int): C.

    Returns:
        tuple: boxes [N, K, H, W, 4] (pixels, center format), objectness [N, K, H, W],
        class probabilities [N, K, C, H, W].
    """
    raw = np.asarray(raw, dtype=np.float64)
    n, _, gh, gw = raw.shape
    k = len(priors)
    grid = raw.reshape(n, k, 5 + num_classes, gh, gw)
    cols = np.arange(gw, dtype=np.float64)[None, None, None, :]
    rows = np.arange(gh, dtype=np.float64)[None, None, :, None]
    pw = np.asarray(priors, dtype=np.float64)[:, 0][None, :, None, None]
    ph = np.asarray(priors, dtype=np.float64)[:, 1][None, :, None, None]
    boxes = np.stack([
        (expit(grid[:, :, 0]) + cols) * stride,
        (expit(grid[:, :, 1]) + rows) * stride,
        pw * np.exp(grid[:, :, 2]) * stride,
        ph * np.exp(grid[:, :, 3]) * stride,
    ], axis=-1)
    return boxes, expit(grid[:, :, 4]), expit(grid[:, :, 5:])


def nms(boxes, iou_threshold, score_threshold=0.0):
    """
    Greedy per-class non-maximum suppression.

    Boxes below score_threshold are dropped first. Survivors are visited by descending
    score (equal scores in input order) and kept iff their IoU with every kept box of the
    same class is below iou_threshold.
    """
    candidates = [(i, b) for i, b in enumerate(boxes) if b.score >= score_threshold]
    candidates.sort(key=lambda item: (-item[1].score, item[0]))
    ordered = [b for _, b in candidates]
    if not ordered:
        return []
    overlaps = iou_matrix([_extents(b) for b in ordered], [_extents(b) for b in ordered])
    classes = np.array([b.class_id for b in ordered])
    kept = []
    for i in range(len(ordered)):
        same = [j for j in kept if classes[j] == classes[i]]
        if not same or np.all(overlaps[i, same] < iou_threshold):
            kept.append(i)
    return [ordered[i] for i in kept]


def paired_iou(a, b):
    """Elementwise IoU of two (..., 4) center-format arrays with matching leading shape."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    union = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1]) + (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1]) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
