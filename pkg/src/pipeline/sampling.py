"""Neighbour-frame sampling around a reference frame."""
import dataclasses

import numpy as np

from src.utils.errors import ConfigError, DatasetError


@dataclasses.dataclass
class FrameStack:
    frames: np.ndarray      # [T, C, H, W], temporal order preserved
    boxes: list             # GroundTruthBox list of the reference frame
    indices: tuple          # sequence frame index of every stack position
    reference: int


def stack_offsets(num_frames, rng=None, neighbor_range=10, train=True):
    """
    Offsets of the neighbours of a (2m+1)-frame stack, earlier ones first.

    Training draws the m earlier offsets from U{-R..-1} and the m later ones from
    U{1..R}, each side sorted; evaluation uses the fixed offsets -m..-1 and 1..m.
    """
    if num_frames < 1 or num_frames % 2 == 0:
        raise ConfigError(f"stack size must be a positive odd number, got {num_frames}")
    if neighbor_range < 1:
        raise ConfigError(f"neighbor_range must be >= 1, got {neighbor_range}")
    m = num_frames // 2
    if not train:
        return list(range(-m, 0)), list(range(1, m + 1))
    if rng is None:
        raise ConfigError("stack_offsets: training mode needs a random generator")
    earlier = sorted(int(v) for v in rng.integers(-neighbor_range, 0, size=m))
    later = sorted(int(v) for v in rng.integers(1, neighbor_range + 1, size=m))
    return earlier, later


def sample_training_stack(sequence, reference_index, rng=None, num_frames=3, neighbor_range=10, train=True):
    """
    Builds the model input around one reference frame.

    Neighbour indices are clamped into the sequence, so near its ends a neighbour may
    repeat the reference frame. Ground truth comes from the reference frame only.

    Returns:
        FrameStack: the reference sits at the centre position of the stack.
    """
    length = sequence.num_frames
    if not 0 <= reference_index < length:
        raise DatasetError(f"reference frame {reference_index} outside sequence {sequence.seq_id} of {length} frames")
    earlier, later = stack_offsets(num_frames, rng, neighbor_range, train)
    indices = tuple(min(max(reference_index + o, 0), length - 1) for o in earlier + [0] + later)
    frames = sequence.frames.data[list(indices)]
    return FrameStack(frames, list(sequence.boxes[reference_index]), indices, reference_index)
