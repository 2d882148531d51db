from src.pipeline.augment import AugmentConfig, augment, crop_resize, hflip, hsv_jitter
from src.pipeline.evaluator import EvalReport, average_precision, detect_dataset, evaluate_map
from src.pipeline.experiments import PRESETS, ExperimentConfig, run_experiment
from src.pipeline.sampling import FrameStack, sample_training_stack, stack_offsets
from src.pipeline.trainer import TrainConfig, TrainResult, train
