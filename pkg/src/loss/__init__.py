from src.loss.focal import FocalConfig, binary_focal, focal_loss, smooth_l1, smooth_l1_grad
from src.loss.objective import LossConfig, LossResult, TargetGrid, build_targets, multi_part_loss
