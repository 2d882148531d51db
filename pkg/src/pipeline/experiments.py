"""
Experiment presets: focal-parameter sweep, 3D vs equal-parameter 2D ablation, the
combination of both, and the small-sample overfit check.

Each preset returns a comparison table with one row per (variant, seed) plus a mean
row per variant, and config hashes identifying every trained configuration.
"""
import dataclasses
import logging
import os

import numpy as np
import pandas as pd

from src.loss.focal import FocalConfig
from src.loss.objective import LossConfig
from src.model.config import ModelConfig
from src.model.network import build_model
from src.pipeline.augment import AugmentConfig
from src.pipeline.evaluator import detect_dataset, evaluate_map
from src.pipeline.trainer import TrainConfig, train
from src.synthvid.generator import SCENARIOS, SceneSpec, build_benchmark
from src.tensor.core import SgdConfig
from src.utils.config import config_hash
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

PRESETS = ("focal_sweep", "ablation_2d_vs_3d", "full", "overfit")
FOCAL_GAMMAS = (0.0, 1.0, 2.0, 3.0, 4.0)
TABLE_COLUMNS = ["preset", "variant", "seed", "map"] + [f"map_{s}" for s in SCENARIOS] + ["final_loss", "config_hash"]


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Scale of a preset run; tests shrink these to miniature versions."""
    sequences: int = 200
    train_fraction: float = 0.8
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 30
    lr_boundary: int = 22
    master_seed: int = 0
    score_thresh: float = 0.01
    iou_threshold: float = 0.5
    frame_step: int = 4
    workers: int = 1
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(epochs=30, lr_boundary=22)
    loss: LossConfig = LossConfig()
    scene: SceneSpec = SceneSpec()

    def __post_init__(self):
        if self.sequences < 2:
            raise ConfigError(f"ExperimentConfig.sequences must be >= 2, got {self.sequences}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"ExperimentConfig.train_fraction must be in (0, 1), got {self.train_fraction}")
        if not self.seeds:
            raise ConfigError("ExperimentConfig.seeds must not be empty")

    def train_config(self, seed, **overrides):
        return self.train.replace(epochs=self.epochs, lr_boundary=min(self.lr_boundary, self.epochs),
                                  seed=seed, **overrides)


def _split(samples, fraction):
    cut = max(1, min(len(samples) - 1, int(round(len(samples) * fraction))))
    return samples[:cut], samples[cut:]


def _run_variant(preset, variant, seed, train_set, test_set, model_cfg, train_cfg, loss_cfg, exp, out_dir, progress):
    model = build_model(model_cfg, seed=seed)
    run_dir = os.path.join(out_dir, f"{variant}_seed{seed}") if out_dir else None
    result = train(model, train_set, train_cfg, loss_cfg, out_dir=run_dir, progress=progress)
    found = detect_dataset(model, test_set, score_thresh=exp.score_thresh, frame_step=exp.frame_step,
                           workers=exp.workers, progress=progress)
    report = evaluate_map(found["detections"], found["gts"], exp.iou_threshold, scenarios=found["scenarios"],
                          num_classes=model_cfg.num_classes)
    row = {"preset": preset, "variant": variant, "seed": seed, "map": report.mean_ap,
           "final_loss": result.final_loss, "config_hash": config_hash(model_cfg, train_cfg, loss_cfg)}
    for s in SCENARIOS:
        row[f"map_{s}"] = report.scenarios.get(s, np.nan)
    logger.info("%s %s seed %d: mAP %.4f", preset, variant, seed, report.mean_ap)
    return row


def _with_means(rows):
    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    means = []
    for (preset, variant), group in table.groupby(["preset", "variant"], sort=False):
        mean = {"preset": preset, "variant": variant, "seed": "mean", "config_hash": group["config_hash"].iloc[0]}
        for col in ["map"] + [f"map_{s}" for s in SCENARIOS] + ["final_loss"]:
            mean[col] = group[col].mean()
        means.append(mean)
    return pd.concat([table, pd.DataFrame(means, columns=TABLE_COLUMNS)], ignore_index=True)


def focal_sweep(exp, out_dir=None, progress=True, gammas=FOCAL_GAMMAS):
    samples = build_benchmark(exp.sequences, "standard", exp.master_seed, exp.scene, exp.workers, progress)
    train_set, test_set = _split(samples, exp.train_fraction)
    rows = []
    for gamma in gammas:
        loss_cfg = dataclasses.replace(exp.loss, focal=FocalConfig(gamma=gamma, alpha=exp.loss.focal.alpha))
        for seed in exp.seeds:
            rows.append(_run_variant("focal_sweep", f"gamma={gamma:g}", seed, train_set, test_set, exp.model,
                                     exp.train_config(seed), loss_cfg, exp, out_dir, progress))
    return _with_means(rows)


def ablation_2d_vs_3d(exp, out_dir=None, progress=True):
    samples = build_benchmark(exp.sequences, "blur_heavy", exp.master_seed, exp.scene, exp.workers, progress)
    train_set, test_set = _split(samples, exp.train_fraction)
    rows = []
    for mode in ("3d", "2d"):
        model_cfg = exp.model.replace(temporal_mode=mode)
        for seed in exp.seeds:
            rows.append(_run_variant("ablation_2d_vs_3d", mode, seed, train_set, test_set, model_cfg,
                                     exp.train_config(seed), exp.loss, exp, out_dir, progress))
    return _with_means(rows)


def overfit(exp, out_dir=None, progress=True, samples=8, max_steps=500):
    """Trains on a handful of sequences with fixed middle references and scores those same frames."""
    scene = exp.scene.replace(object_count=(1, 2), jitter_px=0.0, noise_level=0.0)
    data = build_benchmark(samples, "clean", exp.master_seed, scene, 1, progress)
    seed = exp.seeds[0]
    train_cfg = TrainConfig(epochs=max_steps, lr_boundary=max_steps, lr_before=exp.train.lr_before,
                            sgd=SgdConfig(batch_size=samples, weight_decay=0.0),
                            augment=AugmentConfig.disabled(), fixed_references=True, max_steps=max_steps,
                            seed=seed)
    model = build_model(exp.model, seed=seed)
    result = train(model, data, train_cfg, exp.loss,
                   out_dir=os.path.join(out_dir, "overfit") if out_dir else None, progress=progress)
    found = detect_dataset(model, data, score_thresh=exp.score_thresh, middle_only=True, progress=False)
    report = evaluate_map(found["detections"], found["gts"], exp.iou_threshold, num_classes=exp.model.num_classes)
    row = {"preset": "overfit", "variant": "fixed", "seed": seed, "map": report.mean_ap,
           "final_loss": result.final_loss, "config_hash": config_hash(exp.model, train_cfg, exp.loss)}
    return pd.DataFrame([row], columns=TABLE_COLUMNS)


def run_experiment(preset, exp=None, out_dir=None, progress=True):
    """
    Runs one preset and writes <out_dir>/<preset>.csv.

    Returns:
        pd.DataFrame: The comparison table.
    """
    exp = exp or ExperimentConfig()
    if preset == "focal_sweep":
        table = focal_sweep(exp, out_dir, progress)
    elif preset == "ablation_2d_vs_3d":
        table = ablation_2d_vs_3d(exp, out_dir, progress)
    elif preset == "full":
        table = pd.concat([focal_sweep(exp, out_dir, progress), ablation_2d_vs_3d(exp, out_dir, progress)],
                          ignore_index=True)
    elif preset == "overfit":
        table = overfit(exp, out_dir, progress)
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"{preset}.csv")
        table.to_csv(path, index=False)
        logger.info("experiment table written: %s", path)
    return table
