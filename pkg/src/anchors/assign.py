import dataclasses
import logging
import math

from src.geometry.boxes import shape_iou
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class GridSpec:
    cells_x: int
    cells_y: int
    stride: float

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1 or self.stride <= 0:
            raise ConfigError(f"GridSpec needs positive extents and stride, got {self}")

    def cell_of(self, cx, cy):
        """Cell containing a pixel-space center; the far frame edge belongs to the last cell."""
        width, height = self.cells_x * self.stride, self.cells_y * self.stride
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f"box center ({cx}, {cy}) lies outside the {width}x{height} frame")
        col = min(int(math.floor(cx / self.stride)), self.cells_x - 1)
        row = min(int(math.floor(cy / self.stride)), self.cells_y - 1)
        return col, row


def anchor_ranking(gt, anchors, stride):
    """Anchor indices by descending shape-IoU with the gt; ties go to the lower index."""
    priors = anchors.as_array()
    ious = shape_iou(gt.w / stride, gt.h / stride, priors[:, 0], priors[:, 1])
    return sorted(range(len(priors)), key=lambda a: (-ious[a], a))


def assign_responsible(gts, grid, anchors):
    """
    Picks the responsible (cell, anchor) slot of every ground-truth box.

    The cell is the one containing the gt center; the anchor is the one with the highest
    shape-IoU. When two gts claim one slot the larger-area gt keeps it and the other
    takes its next-best anchor in the same cell; a gt finding all K anchors taken is
    dropped.

    Returns:
        dict: gt index -> ((col, row), anchor_index)
    """
    order = sorted(range(len(gts)), key=lambda i: (-gts[i].area, i))
    taken = set()
    assignment = {}
    for i in order:
        gt = gts[i]
        cell = grid.cell_of(gt.cx, gt.cy)
        ranking = anchor_ranking(gt, anchors, grid.stride)
        for rank, a in enumerate(ranking):
            if (cell, a) in taken:
                continue
            if rank > 0:
                logger.warning("anchor slot conflict: gt %d moved from anchor %d to anchor %d in cell %s",
                               i, ranking[0], a, cell)
            taken.add((cell, a))
            assignment[i] = (cell, a)
            break
        else:
            logger.warning("gt %d dropped: all %d anchors of cell %s are taken", i, len(ranking), cell)
    return assignment
