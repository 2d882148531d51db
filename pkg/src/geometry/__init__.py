from src.geometry.boxes import (DetectionBox, GroundTruthBox, RawPrediction, decode, decode_grid,
                                encode, from_corners, iou, iou_matrix, nms, paired_iou, shape_iou,
                                to_corners)
