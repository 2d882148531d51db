"""
SGD training loop: sample stacks, augment, forward, multi-part loss, backward, update.

Given the same model, dataset, configs and seed, a single-threaded run reproduces the
metrics log and the checkpoints byte for byte.
"""
import dataclasses
import json
import logging
import math
import os
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.anchors.assign import GridSpec
from src.geometry.boxes import GroundTruthBox
from src.loss.objective import LossConfig, build_targets, multi_part_loss
from src.model.checkpoint import save_checkpoint
from src.model.network import build_model, forward_sequence
from src.pipeline.augment import AugmentConfig, augment
from src.pipeline.sampling import sample_training_stack
from src.tensor.core import SgdConfig, backward
from src.tensor.gradcheck import finite_diff_check
from src.tensor.optim import sgd_step
from src.utils.config import config_hash, to_plain
from src.utils.errors import ConfigError, DatasetError, NumericError

logger = logging.getLogger(__name__)

LR_READINGS = {
    "corrected": (1e-3, 1e-4),
    "literal": (1e-2, 1e-3),
}
METRIC_COLUMNS = ["step", "epoch", "lr", "loss_total", "loss_reg", "loss_obj", "loss_cls"]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr_boundary: int = 60
    lr_reading: str = "corrected"
    lr_before: Optional[float] = None
    lr_after: Optional[float] = None
    sgd: SgdConfig = SgdConfig()
    augment: AugmentConfig = AugmentConfig()
    neighbor_range: int = 10
    samples_per_sequence: int = 1
    max_steps: Optional[int] = None
    fixed_references: bool = False
    checkpoint_every_boundary: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"TrainConfig.epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.lr_boundary <= self.epochs:
            raise ConfigError(f"TrainConfig.lr_boundary {self.lr_boundary} must lie within 0..{self.epochs} epochs")
        if self.lr_reading not in LR_READINGS:
            raise ConfigError(f"TrainConfig.lr_reading must be one of {sorted(LR_READINGS)}, got {self.lr_reading!r}")
        for name in ("lr_before", "lr_after"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"TrainConfig.{name} must be >= 0, got {value}")
        if self.neighbor_range < 1:
            raise ConfigError(f"TrainConfig.neighbor_range must be >= 1, got {self.neighbor_range}")
        if self.samples_per_sequence < 1:
            raise ConfigError(f"TrainConfig.samples_per_sequence must be >= 1, got {self.samples_per_sequence}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"TrainConfig.max_steps must be >= 1, got {self.max_steps}")

    def learning_rate(self, epoch):
        """Rate for a 0-based epoch index: lr_before until the boundary epoch, lr_after from it on."""
        before, after = LR_READINGS[self.lr_reading]
        if self.lr_before is not None:
            before = self.lr_before
        if self.lr_after is not None:
            after = self.lr_after
        return before if epoch < self.lr_boundary else after

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class TrainResult:
    model: object
    metrics: pd.DataFrame
    checkpoint: Optional[str] = None
    boundary_checkpoints: list = dataclasses.field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self):
        return float(self.metrics["loss_total"].iloc[-1]) if len(self.metrics) else math.nan


def _epoch_items(dataset, cfg, rng):
    items = []
    for s, sequence in enumerate(dataset):
        if cfg.fixed_references:
            items.append((s, sequence.num_frames // 2))
            continue
        for ref in rng.integers(0, sequence.num_frames, size=cfg.samples_per_sequence):
            items.append((s, int(ref)))
    if not cfg.fixed_references:
        rng.shuffle(items)
    return items


def _make_batch(dataset, items, model, cfg, rng):
    frames, boxes = [], []
    train_mode = not cfg.fixed_references
    for s, ref in items:
        stack = sample_training_stack(dataset[s], ref, rng, num_frames=model.cfg.frames,
                                      neighbor_range=cfg.neighbor_range, train=train_mode)
        stack_frames, stack_boxes = stack.frames, stack.boxes
        if train_mode:
            stack_frames, stack_boxes = augment(stack_frames, stack_boxes, rng, cfg.augment)
        frames.append(stack_frames)
        boxes.append(stack_boxes)
    return np.stack(frames).astype(model.dtype, copy=False), boxes


def loss_and_gradients(model, frames, targets, loss_cfg):
    """
    One forward/backward pass in train mode.

    Returns:
        tuple: (output Tensor, LossResult, name -> gradient dict), the gradients being
        None when the loss or its gradient is not finite.
    """
    output, tape = forward_sequence(model, frames, train=True)
    loss = multi_part_loss(output, targets, loss_cfg)
    if not (math.isfinite(loss.total) and np.isfinite(loss.grad).all()):
        return output, loss, None
    grads = backward(tape, loss.grad, output=output)
    return output, loss, grads.named(model.parameters())


def _write_diagnostics(out_dir, step, epoch, lr, loss, grid, model):
    report = {
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "loss": {k: float(v) for k, v in loss.components().items()},
        "output": {
            "non_finite": int(np.size(grid) - np.isfinite(grid).sum()),
            "max_abs": float(np.nanmax(np.abs(grid))) if np.isfinite(grid).any() else None,
        },
        "parameters": {name: {"norm": float(np.linalg.norm(t.data)), "finite": bool(np.isfinite(t.data).all())}
                       for name, t in model.parameters().items()},
    }
    path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "diagnostics.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
    return path


def train(model, dataset, cfg=TrainConfig(), loss_cfg=LossConfig(), out_dir=None, progress=True):
    """
    Trains the model in place.

    Args:
        model (DetNet): Network to train; its parameters are replaced step by step.
        dataset (list): SequenceSample objects.
        cfg (TrainConfig): Schedule, SGD and sampling settings.
        loss_cfg (LossConfig): Objective settings.
        out_dir (str, optional): Where metrics.csv, train_meta.json and checkpoints go.
        progress (bool): Show a tqdm bar over epochs.

    Returns:
        TrainResult
    """
    if not dataset:
        raise DatasetError("train: dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    mcfg = model.cfg
    _, _, height, width = dataset[0].frames.shape
    grid = GridSpec(width // mcfg.stride, height // mcfg.stride, mcfg.stride)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"train": to_plain(cfg), "loss": to_plain(loss_cfg), "model": to_plain(mcfg),
                "config_hash": config_hash(mcfg, cfg, loss_cfg), "sequences": len(dataset)}
        with open(os.path.join(out_dir, "train_meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    logger.info("training: %d sequences, %d epochs, balance λ=%s, γ=%s", len(dataset), cfg.epochs,
                loss_cfg.balance, loss_cfg.focal.gamma)

    rows, velocity, step = [], None, 0
    boundary_paths = []
    current_lr = None
    done = False
    for epoch in tqdm(range(cfg.epochs), desc="train", disable=not progress):
        lr = cfg.learning_rate(epoch)
        if lr != current_lr:
            logger.info("epoch %d: learning rate %g", epoch + 1, lr)
            current_lr = lr
        sgd_cfg = dataclasses.replace(cfg.sgd, learning_rate=lr)
        items = _epoch_items(dataset, cfg, rng)
        for start in range(0, len(items), cfg.sgd.batch_size):
            step += 1
            frames, boxes = _make_batch(dataset, items[start:start + cfg.sgd.batch_size], model, cfg, rng)
            targets = build_targets(boxes, grid, model.anchors, mcfg.num_classes)
            output, loss, grads = loss_and_gradients(model, frames, targets, loss_cfg)
            if grads is None:
                path = _write_diagnostics(out_dir, step, epoch + 1, lr, loss, output.data, model)
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch + 1}); diagnostics: {path}")
            new_params, velocity = sgd_step(model.parameters(), grads, velocity, sgd_cfg)
            model.update(new_params)
            rows.append({"step": step, "epoch": epoch + 1, "lr": lr, **loss.components()})
            logger.debug("step %d: total %.6f reg %.6f obj %.6f cls %.6f", step, loss.total,
                         loss.regression, loss.objectness, loss.classification)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if (out_dir and cfg.checkpoint_every_boundary and epoch + 1 == cfg.lr_boundary
                and cfg.lr_boundary < cfg.epochs and not done):
            boundary_paths.append(save_checkpoint(model, os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:03d}.bin")))
        if done:
            break

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    final_path = None
    if out_dir:
        metrics.to_csv(os.path.join(out_dir, "metrics.csv"), index=False)
        final_path = save_checkpoint(model, os.path.join(out_dir, "model.bin"))
    return TrainResult(model, metrics, final_path, boundary_paths, step)


def random_boxes(rng, height, width, count, num_classes=1, min_side=4.0):
    boxes = []
    for _ in range(count):
        w = rng.uniform(min_side, width / 2)
        h = rng.uniform(min_side, height / 2)
        boxes.append(GroundTruthBox(rng.uniform(w / 2, width - w / 2), rng.uniform(h / 2, height - h / 2),
                                    w, h, int(rng.integers(num_classes))))
    return boxes


def model_gradient_check(model_cfg, loss_cfg=LossConfig(objectness_target="fixed"), seed=0, batch=2,
                         epsilon=1e-4, max_coords=5):
    """
    Finite-difference check of the composed model and loss in 64-bit precision.

    Objectness targets from predicted IoU are held constant by the loss gradient, so
    loss_cfg should use the fixed target for the numbers to agree.

    Returns:
        float: Maximum relative error over the sampled parameter coordinates.
    """
    rng = np.random.default_rng(seed)
    model = build_model(model_cfg, seed=seed, dtype=np.float64)
    frames = rng.uniform(0, 1, size=(batch, model_cfg.frames, model_cfg.in_channels,
                                     model_cfg.height, model_cfg.width))
    gts = [random_boxes(rng, model_cfg.height, model_cfg.width, 2, model_cfg.num_classes) for _ in range(batch)]
    grid = GridSpec(model_cfg.width // model_cfg.stride, model_cfg.height // model_cfg.stride, model_cfg.stride)
    targets = build_targets(gts, grid, model.anchors, model_cfg.num_classes)

    def objective(arrays):
        probe = model.copy()
        probe.update(arrays)
        _, loss, grads = loss_and_gradients(probe, frames, targets, loss_cfg)
        if grads is None:
            raise NumericError("model_gradient_check: non-finite loss")
        return loss.total, grads

    return finite_diff_check(objective, model.parameters(), epsilon=epsilon, max_coords=max_coords, seed=seed)
