"""
Target construction and the multi-part detection objective

    L = λ · L_loc + L_cls

where L_loc is smooth L1 over the four box coordinates of responsible slots and L_cls
is focal loss over objectness (every slot) and class probabilities (responsible slots).
"""
import dataclasses

import numpy as np
from scipy.special import expit

from src.anchors.assign import assign_responsible
from src.geometry.boxes import GroundTruthBox, encode, paired_iou
from src.loss.focal import CROSS_ENTROPY, FocalConfig, binary_focal, smooth_l1, smooth_l1_grad
from src.utils.errors import ConfigError

OBJECTNESS_TARGETS = ("iou", "fixed")


@dataclasses.dataclass(frozen=True)
class LossConfig:
    balance: float = 1.0            # λ
    focal: FocalConfig = FocalConfig()
    noobj_weight: float = 0.5
    smooth_l1_halved: bool = False
    objectness_target: str = "iou"
    focal_objectness: bool = True
    focal_classes: bool = True

    def __post_init__(self):
        if not self.balance > 0:
            raise ConfigError(f"LossConfig.balance (λ) must be > 0, got {self.balance}")
        if self.noobj_weight < 0:
            raise ConfigError(f"LossConfig.noobj_weight must be >= 0, got {self.noobj_weight}")
        if self.objectness_target not in OBJECTNESS_TARGETS:
            raise ConfigError(f"LossConfig.objectness_target must be one of {OBJECTNESS_TARGETS}")


@dataclasses.dataclass
class TargetGrid:
    """Per (sample, anchor, cell) training targets. Box targets are in cell units."""
    objectness: np.ndarray      # [N, K, H, W]
    regression: np.ndarray      # [N, K, 4, H, W] (t_x, t_y, t_w, t_h)
    classes: np.ndarray         # [N, K, C, H, W] one-hot
    positive: np.ndarray        # [N, K, H, W] bool
    gt_boxes: np.ndarray        # [N, K, 4, H, W] (cx, cy, w, h) in cells
    priors: np.ndarray          # [K, 2]

    @property
    def num_positives(self):
        return int(self.positive.sum())

    @property
    def batch_size(self):
        return self.positive.shape[0]


@dataclasses.dataclass
class LossResult:
    total: float
    regression: float
    objectness: float
    classification: float
    grad: np.ndarray

    def components(self):
        return {"loss_total": self.total, "loss_reg": self.regression,
                "loss_obj": self.objectness, "loss_cls": self.classification}


def build_targets(gts, grid, anchors, num_classes=1):
    """
    Builds the TargetGrid for a batch.

    Args:
        gts (list): Per-sample lists of GroundTruthBox (a flat list is one sample).
        grid (GridSpec): Cell extents and stride of the prediction grid.
        anchors (AnchorSet): Priors in cell units.
        num_classes (int): C.

    Returns:
        TargetGrid: responsible slots hold encoded box targets, one-hot classes and
        objectness 1; every other slot is a negative with objectness 0.
    """
    if not gts or isinstance(gts[0], GroundTruthBox):
        gts = [gts]
    n, k = len(gts), len(anchors)
    shape = (n, k, grid.cells_y, grid.cells_x)
    targets = TargetGrid(
        objectness=np.zeros(shape),
        regression=np.zeros((n, k, 4, grid.cells_y, grid.cells_x)),
        classes=np.zeros((n, k, num_classes, grid.cells_y, grid.cells_x)),
        positive=np.zeros(shape, dtype=bool),
        gt_boxes=np.zeros((n, k, 4, grid.cells_y, grid.cells_x)),
        priors=anchors.as_array(),
    )
    for s, sample in enumerate(gts):
        for i, ((col, row), a) in assign_responsible(sample, grid, anchors).items():
            gt = sample[i]
            if not 0 <= gt.class_id < num_classes:
                raise ConfigError(f"build_targets: class id {gt.class_id} outside 0..{num_classes - 1}")
            targets.regression[s, a, :, row, col] = encode(gt, (col, row), anchors[a], grid.stride)
            targets.classes[s, a, gt.class_id, row, col] = 1.0
            targets.objectness[s, a, row, col] = 1.0
            targets.positive[s, a, row, col] = True
            targets.gt_boxes[s, a, :, row, col] = (gt.cx / grid.stride, gt.cy / grid.stride,
                                                   gt.w / grid.stride, gt.h / grid.stride)
    return targets


def _predicted_boxes(grid_values, priors):
    """Cell-unit boxes [N, K, H, W, 4] from raw coordinates [N, K, 4, H, W]."""
    _, _, _, gh, gw = grid_values.shape
    cols = np.arange(gw)[None, None, None, :]
    rows = np.arange(gh)[None, None, :, None]
    return np.stack([
        expit(grid_values[:, :, 0]) + cols,
        expit(grid_values[:, :, 1]) + rows,
        priors[None, :, 0, None, None] * np.exp(grid_values[:, :, 2]),
        priors[None, :, 1, None, None] * np.exp(grid_values[:, :, 3]),
    ], axis=-1)


def multi_part_loss(raw, targets, cfg=LossConfig()):
    """
    Scalar detection loss and its gradient with respect to the raw head output.

    Args:
        raw: [N, K*(5+C), H, W] head output (Tensor or array), anchor-major channels.
        targets (TargetGrid): From build_targets.
        cfg (LossConfig): Weights and focal parameters.

    Returns:
        LossResult: total and per-component values; grad has the dtype of raw.
    """
    raw_array = getattr(raw, "data", raw)
    dtype = raw_array.dtype
    n, channels, gh, gw = raw_array.shape
    k = len(targets.priors)
    num_classes = targets.classes.shape[2]
    if channels != k * (5 + num_classes):
        raise ConfigError(f"multi_part_loss: {channels} channels but K={k}, C={num_classes} needs {k * (5 + num_classes)}")
    values = np.asarray(raw_array, dtype=np.float64).reshape(n, k, 5 + num_classes, gh, gw)
    grad = np.zeros_like(values)
    pos = targets.positive
    npos = targets.num_positives

    diff = values[:, :, 0:4] - targets.regression
    mask = pos[:, :, None].astype(np.float64)
    scale = cfg.balance / max(1, npos)
    regression = scale * float((smooth_l1(diff, cfg.smooth_l1_halved) * mask).sum())
    grad[:, :, 0:4] = scale * smooth_l1_grad(diff, cfg.smooth_l1_halved) * mask

    obj_target = targets.objectness.copy()
    if cfg.objectness_target == "iou" and npos:
        boxes = _predicted_boxes(values[:, :, 0:4], targets.priors)
        ious = paired_iou(boxes, np.moveaxis(targets.gt_boxes, 2, -1))
        obj_target = np.where(pos, ious, 0.0)
    obj_cfg = cfg.focal if cfg.focal_objectness else CROSS_ENTROPY
    weights = np.where(pos, 1.0, cfg.noobj_weight)
    obj_loss, obj_grad = binary_focal(values[:, :, 4], obj_target, obj_cfg)
    objectness = float((weights * obj_loss).sum()) / n
    grad[:, :, 4] = weights * obj_grad / n

    cls_cfg = cfg.focal if cfg.focal_classes else CROSS_ENTROPY
    cls_loss, cls_grad = binary_focal(values[:, :, 5:], targets.classes, cls_cfg)
    classification = float((cls_loss * mask).sum()) / n
    grad[:, :, 5:] = cls_grad * mask / n

    total = regression + objectness + classification
    return LossResult(total, regression, objectness, classification,
                      grad.reshape(n, channels, gh, gw).astype(dtype))
