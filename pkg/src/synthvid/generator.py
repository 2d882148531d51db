"""
Synthetic video scenes: coloured rectangles moving at constant velocity over a static
textured background, rendered with optional motion blur, defocus and low light.

Ground truth is the unblurred rectangle extent in every frame.
"""
import concurrent.futures
import dataclasses
import logging
import math

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from src.geometry.boxes import GroundTruthBox
from src.tensor.core import Tensor
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

SCENARIOS = ("clean", "blur", "defocus", "dark")
MIN_FRAMES = 21

MIXES = {
    "standard": {"clean": 0.25, "blur": 0.25, "defocus": 0.25, "dark": 0.25},
    "blur_heavy": {"clean": 0.2, "blur": 0.5, "defocus": 0.15, "dark": 0.15},
    "clean": {"clean": 1.0},
}


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 21
    object_count: tuple[int, int] = (1, 3)
    speed_range: tuple[float, float] = (0.5, 1.5)        # px / frame
    heading_range: tuple[float, float] = (0.0, 360.0)    # degrees
    size_range: tuple[float, float] = (8.0, 18.0)        # px per side
    jitter_px: float = 0.25
    blur_factor: float = 3.0                             # blur kernel length per px/frame of speed
    defocus_radius: tuple[float, float] = (1.0, 2.5)
    noise_level: float = 0.02
    dark_gain: float = 0.35
    num_classes: int = 1
    scenario: str = "clean"
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < MIN_FRAMES:
            raise ConfigError(f"SceneSpec.num_frames must be >= {MIN_FRAMES}, got {self.num_frames}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"SceneSpec.scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.num_classes not in (1, 2):
            raise ConfigError(f"SceneSpec.num_classes must be 1 or 2, got {self.num_classes}")
        for name in ("object_count", "speed_range", "heading_range", "size_range", "defocus_radius"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"SceneSpec.{name} must be (min, max), got ({lo}, {hi})")
        if self.object_count[0] < 0:
            raise ConfigError("SceneSpec.object_count must be non-negative")
        if self.speed_range[0] < 0 or self.size_range[0] <= 0:
            raise ConfigError("SceneSpec.speed_range must be >= 0 and size_range > 0")
        if self.defocus_radius[0] < 0 or self.jitter_px < 0 or self.noise_level < 0 or self.blur_factor < 0:
            raise ConfigError("SceneSpec.defocus_radius, jitter_px, noise_level and blur_factor must be >= 0")
        if not 0 < self.dark_gain <= 1:
            raise ConfigError(f"SceneSpec.dark_gain must be in (0, 1], got {self.dark_gain}")
        travel = self.speed_range[1] * (self.num_frames - 1) + self.size_range[1] + 2 * self.jitter_px
        if travel > min(self.height, self.width):
            raise ConfigError(
                f"SceneSpec cannot keep objects in frame: max speed {self.speed_range[1]} over "
                f"{self.num_frames} frames plus size {self.size_range[1]} spans {travel:.1f} px, "
                f"frame is {self.width}x{self.height}"
            )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class SequenceSample:
    frames: Tensor          # [T, 3, H, W] in [0, 1]
    boxes: list             # per frame: list of GroundTruthBox
    scenario: str
    seed: int
    seq_id: int = 0

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclasses.dataclass
class _Track:
    start: np.ndarray       # top-left corner at frame 0
    velocity: np.ndarray
    size: np.ndarray        # (w, h)
    color: np.ndarray       # (3,)
    class_id: int


def _sample_track(spec, rng):
    size = rng.uniform(*spec.size_range, size=2)
    speed = rng.uniform(*spec.speed_range)
    heading = math.radians(rng.uniform(*spec.heading_range))
    velocity = np.array([speed * math.cos(heading), speed * math.sin(heading)])
    extent = np.array([spec.width, spec.height], dtype=np.float64)
    span = velocity * (spec.num_frames - 1)
    # Feasible top-left positions keep the box inside the frame for the whole sequence.
    low = spec.jitter_px - np.minimum(span, 0)
    high = extent - size - spec.jitter_px - np.maximum(span, 0)
    start = rng.uniform(low, np.maximum(high, low))
    class_id = int(rng.integers(spec.num_classes))
    light = class_id == 0 if spec.num_classes == 2 else bool(rng.integers(2))
    color = rng.uniform(0.7, 1.0, size=3) if light else rng.uniform(0.0, 0.3, size=3)
    return _Track(start, velocity, size, color, class_id)


def coverage_mask(height, width, x1, y1, x2, y2):
    """Fraction of every pixel covered by the axis-aligned rectangle [x1, x2) x [y1, y2)."""
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    cover_x = np.clip(np.minimum(x2, cols + 1) - np.maximum(x1, cols), 0, 1)
    cover_y = np.clip(np.minimum(y2, rows + 1) - np.maximum(y1, rows), 0, 1)
    return np.outer(cover_y, cover_x)


def line_kernel(velocity, length):
    """Normalised line kernel of the given length along the velocity direction."""
    speed = float(np.hypot(*velocity))
    if length < 1 or speed == 0:
        return np.ones((1, 1))
    half = int(math.ceil(length / 2))
    kernel = np.zeros((2 * half + 1, 2 * half + 1))
    direction = np.asarray(velocity, dtype=np.float64) / speed
    for t in np.linspace(-length / 2, length / 2, 4 * half + 1):
        x, y = half + t * direction[0], half + t * direction[1]
        kernel[int(round(y)), int(round(x))] += 1.0
    return kernel / kernel.sum()


def disk_kernel(radius):
    if radius < 0.5:
        return np.ones((1, 1))
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    kernel = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return kernel / kernel.sum()


def blur(image, kernel):
    """Convolves a [H, W] or [C, H, W] image with a normalised 2D kernel (reflecting borders)."""
    if kernel.shape == (1, 1):
        return image
    if image.ndim == 2:
        return ndimage.convolve(image, kernel, mode="reflect")
    return np.stack([ndimage.convolve(channel, kernel, mode="reflect") for channel in image])


def _background(spec, rng):
    base = rng.uniform(0.35, 0.65, size=3)[:, None, None]
    texture = ndimage.gaussian_filter(rng.normal(0, 1, size=(spec.height, spec.width)), sigma=4)
    texture = texture / (np.abs(texture).max() + 1e-12) * 0.08
    return np.clip(base + texture[None], 0, 1)


def generate_sequence(spec):
    """
    Renders one sequence.

    Every object keeps a constant velocity plus per-frame jitter of at most jitter_px and
    stays fully inside the frame. Blur and defocus only alter pixels; the boxes are
    always the sharp rectangle extents.

    Returns:
        SequenceSample
    """
    rng = np.random.default_rng(spec.seed)
    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    tracks = [_sample_track(spec, rng) for _ in range(count)]
    background = _background(spec, rng)
    defocus = disk_kernel(rng.uniform(*spec.defocus_radius)) if spec.scenario == "defocus" else np.ones((1, 1))

    frames = np.empty((spec.num_frames, 3, spec.height, spec.width), dtype=np.float32)
    boxes = []
    for t in range(spec.num_frames):
        frame = background.copy()
        frame_boxes = []
        for track in tracks:
            jitter = rng.uniform(-spec.jitter_px, spec.jitter_px, size=2) if spec.jitter_px else np.zeros(2)
            x1, y1 = track.start + track.velocity * t + jitter
            w, h = track.size
            alpha = coverage_mask(spec.height, spec.width, x1, y1, x1 + w, y1 + h)
            if spec.scenario == "blur":
                alpha = blur(alpha, line_kernel(track.velocity, spec.blur_factor * np.hypot(*track.velocity)))
            frame = frame * (1 - alpha[None]) + track.color[:, None, None] * alpha[None]
            frame_boxes.append(GroundTruthBox(float(x1 + w / 2), float(y1 + h / 2), float(w), float(h), track.class_id))
        frame = blur(frame, defocus)
        if spec.scenario == "dark":
            frame = frame * spec.dark_gain
        if spec.noise_level:
            frame = frame + rng.normal(0, spec.noise_level, size=frame.shape)
        frames[t] = np.clip(frame, 0, 1)
        boxes.append(frame_boxes)
    return SequenceSample(Tensor.wrap(frames), boxes, spec.scenario, spec.seed)


def mix_counts(n, mix):
    """Largest-remainder split of n sequences over the scenario weights (ties by scenario order)."""
    if isinstance(mix, str):
        if mix not in MIXES:
            raise ConfigError(f"unknown scenario mix {mix!r}; choose from {sorted(MIXES)}")
        mix = MIXES[mix]
    unknown = [s for s in mix if s not in SCENARIOS]
    if unknown:
        raise ConfigError(f"unknown scenario(s) in mix: {unknown}")
    total = float(sum(mix.values()))
    if total <= 0 or any(v < 0 for v in mix.values()):
        raise ConfigError("scenario mix weights must be non-negative with a positive sum")
    quotas = {s: n * w / total for s, w in mix.items()}
    counts = {s: int(math.floor(q)) for s, q in quotas.items()}
    order = list(mix)
    leftovers = sorted(order, key=lambda s: (-(quotas[s] - counts[s]), order.index(s)))
    for s in leftovers[:n - sum(counts.values())]:
        counts[s] += 1
    return counts


def sequence_seeds(master_seed, n):
    """Per-sequence seeds derived from (master seed, index); independent of worker count."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(master_seed).spawn(n)]


def build_benchmark(n, mix="standard", master_seed=0, base_spec=None, workers=1, progress=True):
    """
    Generates n sequences with scenario counts given by the mix.

    Scenario order is shuffled by the master seed so any prefix or split of the list
    carries a similar mix. Sequence i always gets the same seed and scenario, whatever
    the worker count.

    Returns:
        list: SequenceSample with seq_id 0..n-1.
    """
    base_spec = base_spec or SceneSpec()
    counts = mix_counts(n, mix)
    scenarios = [s for s, c in counts.items() for _ in range(c)]
    np.random.default_rng(master_seed).shuffle(scenarios)
    specs = [base_spec.replace(scenario=s, seed=seed) for s, seed in zip(scenarios, sequence_seeds(master_seed, n))]

    bar = tqdm(total=n, desc="generate", disable=not progress)
    samples = [None] * n
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(generate_sequence, spec): i for i, spec in enumerate(specs)}
            for future in concurrent.futures.as_completed(futures):
                samples[futures[future]] = future.result()
                bar.update(1)
    else:
        for i, spec in enumerate(specs):
            samples[i] = generate_sequence(spec)
            bar.update(1)
    bar.close()
    for i, sample in enumerate(samples):
        sample.seq_id = i
    logger.info("built %d sequences: %s", n, counts)
    return samples
