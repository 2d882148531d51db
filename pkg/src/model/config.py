"""
Model configuration: backbone blocks, temporal kernel schedule, head width and anchors.

Parameter counts are derived from the config alone so the equal-parameter 2D baseline
can be sized before anything is built.
"""
import dataclasses

from src.anchors.kmeans import AnchorSet
from src.utils.errors import ConfigError

TEMPORAL_MODES = ("3d", "2d")
ACTIVATIONS = ("leaky_relu", "logistic")
DEFAULT_PRIORS = ((1.0, 1.0), (1.5, 1.0), (1.0, 1.5), (2.0, 2.0), (3.0, 2.5))


@dataclasses.dataclass(frozen=True)
class BlockSpec:
    """One backbone conv layer (kernel x kernel, 'same' padding), optionally followed by 2x2 max pooling."""
    channels: int
    kernel: int = 3
    pool: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"BlockSpec.channels must be positive, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"BlockSpec.kernel must be a positive odd integer, got {self.kernel}")


DESK_BACKBONE = (
    BlockSpec(16, pool=True),
    BlockSpec(32, pool=True),
    BlockSpec(64, pool=True),
    BlockSpec(64),
)

# DarkNet-19 without its final 1x1 classifier conv: 18 conv + 5 pool layers.
DARKNET_BACKBONE = (
    BlockSpec(32, pool=True),
    BlockSpec(64, pool=True),
    BlockSpec(128), BlockSpec(64, kernel=1), BlockSpec(128, pool=True),
    BlockSpec(256), BlockSpec(128, kernel=1), BlockSpec(256, pool=True),
    BlockSpec(512), BlockSpec(256, kernel=1), BlockSpec(512), BlockSpec(256, kernel=1), BlockSpec(512, pool=True),
    BlockSpec(1024), BlockSpec(512, kernel=1), BlockSpec(1024), BlockSpec(512, kernel=1), BlockSpec(1024),
)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    frames: int = 3
    height: int = 64
    width: int = 64
    in_channels: int = 3
    backbone: tuple[BlockSpec, ...] = DESK_BACKBONE
    temporal_kernels: tuple[tuple[int, int, int], ...] = ((3, 3, 3), (1, 1, 1), (3, 3, 3))
    temporal_width: int = 64
    temporal_mode: str = "3d"
    head_width: int = 128
    num_anchors: int = 5
    num_classes: int = 1
    activation: str = "leaky_relu"
    use_norm: bool = True
    priors: tuple[tuple[float, float], ...] = DEFAULT_PRIORS

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"ModelConfig.frames must be >= 1, got {self.frames}")
        if self.in_channels < 1 or self.num_classes < 1 or self.num_anchors < 1:
            raise ConfigError("ModelConfig.in_channels, num_classes and num_anchors must be positive")
        if self.temporal_width < 1 or self.head_width < 1:
            raise ConfigError("ModelConfig.temporal_width and head_width must be positive")
        if not self.backbone:
            raise ConfigError("ModelConfig.backbone needs at least one block")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"ModelConfig.temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"ModelConfig.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.temporal_kernels:
            raise ConfigError("ModelConfig.temporal_kernels needs at least one kernel")
        for kernel in self.temporal_kernels:
            if len(kernel) != 3 or any(k < 1 for k in kernel):
                raise ConfigError(f"ModelConfig.temporal_kernels entries must be 3 positive extents, got {kernel}")
            if kernel[1] % 2 == 0 or kernel[2] % 2 == 0:
                raise ConfigError(f"ModelConfig.temporal_kernels spatial extents must be odd, got {kernel}")
        for name, size in (("height", self.height), ("width", self.width)):
            if size < self.stride or size % self.stride:
                raise ConfigError(f"ModelConfig.{name} {size} is not a multiple of the stride {self.stride}")
        if len(self.priors) != self.num_anchors:
            raise ConfigError(f"ModelConfig.priors has {len(self.priors)} entries but num_anchors is {self.num_anchors}")
        self.anchor_set()
        if self.temporal_mode == "3d":
            t_out = temporal_extent(self.frames, self.temporal_kernels)
            if t_out != 1:
                raise ConfigError(
                    f"temporal kernel schedule {self.temporal_kernels} maps {self.frames} frames to {t_out}, not 1"
                )

    @property
    def stride(self):
        return 2 ** sum(1 for b in self.backbone if b.pool)

    @property
    def grid_extents(self):
        return self.height // self.stride, self.width // self.stride

    @property
    def output_channels(self):
        return self.num_anchors * (5 + self.num_classes)

    @property
    def reference_index(self):
        return self.frames // 2

    def anchor_set(self):
        return AnchorSet.from_priors(self.priors)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def full_scale(cls, **overrides):
        """DarkNet-19 backbone (last conv removed), 1024-wide temporal stack and head, 416x416 input."""
        settings = dict(height=416, width=416, backbone=DARKNET_BACKBONE, temporal_width=1024, head_width=1024)
        settings.update(overrides)
        return cls(**settings)


def temporal_padding(kernels):
    """'Same' temporal padding on every layer but the last, which is unpadded so time collapses."""
    return [k[0] // 2 for k in kernels[:-1]] + [0]


def temporal_extent(frames, kernels):
    t = frames
    for kernel, pad in zip(kernels, temporal_padding(kernels)):
        t = t + 2 * pad - kernel[0] + 1
        if t < 1:
            return t
    return t


def _conv_count(kernel_volume, c_in, c_out, use_norm):
    # Normalized convs carry scale/shift instead of a bias.
    return kernel_volume * c_in * c_out + (2 * c_out if use_norm else c_out)


def backbone_parameters(cfg):
    total, c_in = 0, cfg.in_channels
    for block in cfg.backbone:
        total += _conv_count(block.kernel ** 2, c_in, block.channels, cfg.use_norm)
        c_in = block.channels
    return total


def temporal_3d_parameters(cfg):
    total, c_in = 0, cfg.backbone[-1].channels
    for kernel in cfg.temporal_kernels:
        total += _conv_count(kernel[0] * kernel[1] * kernel[2], c_in, cfg.temporal_width, cfg.use_norm)
        c_in = cfg.temporal_width
    return total


def temporal_2d_parameters(cfg, width):
    """Spatial-only copy of the schedule; inner layers are `width` wide, the last emits temporal_width."""
    total, c_in = 0, cfg.backbone[-1].channels
    kernels = cfg.temporal_kernels
    for i, kernel in enumerate(kernels):
        c_out = cfg.temporal_width if i == len(kernels) - 1 else width
        total += _conv_count(kernel[1] * kernel[2], c_in, c_out, cfg.use_norm)
        c_in = c_out
    return total


def baseline_width(cfg):
    """Inner width of the 2D baseline whose parameter count is closest to the 3D stack's."""
    if len(cfg.temporal_kernels) == 1:
        return cfg.temporal_width
    target = temporal_3d_parameters(cfg)
    best, best_gap = 1, None
    width = 1
    while True:
        gap = temporal_2d_parameters(cfg, width) - target
        if best_gap is None or abs(gap) < best_gap:
            best, best_gap = width, abs(gap)
        if gap > 0:
            return best
        width += 1


def head_parameters(cfg):
    return (_conv_count(9, cfg.temporal_width, cfg.head_width, cfg.use_norm)
            + _conv_count(9, cfg.head_width, cfg.head_width, cfg.use_norm)
            + _conv_count(1, cfg.head_width, cfg.output_channels, False))


def count_parameters(cfg):
    """Trainable parameter count (running statistics excluded)."""
    if cfg.temporal_mode == "3d":
        temporal = temporal_3d_parameters(cfg)
    else:
        temporal = temporal_2d_parameters(cfg, baseline_width(cfg))
    return backbone_parameters(cfg) + temporal + head_parameters(cfg)
