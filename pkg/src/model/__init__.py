from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.config import BlockSpec, ModelConfig, baseline_width, count_parameters
from src.model.network import DetNet, build_model, detections_from_grid, forward_sequence, predict
