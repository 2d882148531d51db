"""
K-means clustering of box extents into anchor priors.

Distance is 1 - shape-IoU (IoU of two boxes sharing a center), which does not
over-weight large boxes the way Euclidean distance on (w, h) does. Centroids are the
arithmetic mean of their members.
"""
import dataclasses
import json
import logging

import numpy as np

from src.geometry.boxes import shape_iou
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class AnchorPrior:
    p_w: float
    p_h: float

    def __post_init__(self):
        if not (self.p_w > 0 and self.p_h > 0):
            raise ConfigError(f"AnchorPrior extents must be positive, got ({self.p_w}, {self.p_h})")

    @property
    def area(self):
        return self.p_w * self.p_h


@dataclasses.dataclass(frozen=True)
class AnchorSet:
    """K priors in canonical order (area ascending)."""
    priors: tuple

    def __post_init__(self):
        priors = tuple(p if isinstance(p, AnchorPrior) else AnchorPrior(float(p[0]), float(p[1])) for p in self.priors)
        if not priors:
            raise ConfigError("AnchorSet needs at least one prior")
        areas = [p.area for p in priors]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ConfigError("AnchorSet priors must be sorted by area ascending; use AnchorSet.from_priors")
        object.__setattr__(self, "priors", priors)

    @classmethod
    def from_priors(cls, priors):
        priors = [p if isinstance(p, AnchorPrior) else AnchorPrior(float(p[0]), float(p[1])) for p in priors]
        return cls(tuple(sorted(priors, key=lambda p: (p.area, p.p_w))))

    def __len__(self):
        return len(self.priors)

    def __iter__(self):
        return iter(self.priors)

    def __getitem__(self, index):
        return self.priors[index]

    def as_array(self):
        return np.array([[p.p_w, p.p_h] for p in self.priors], dtype=np.float64)

    def to_json(self, stride):
        if float(stride).is_integer():
            stride = int(stride)
        return json.dumps({"k": len(self), "stride": stride, "priors": self.as_array().tolist()})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls.from_priors(data["priors"]), data.get("stride")


@dataclasses.dataclass
class KMeansResult:
    anchors: AnchorSet
    objective: float
    history: list
    assignments: np.ndarray
    iterations: int


def _distances(points, centroids):
    return 1.0 - shape_iou(points[:, None, 0], points[:, None, 1], centroids[None, :, 0], centroids[None, :, 1])


def _objective(points, centroids):
    d = _distances(points, centroids)
    return float(d.min(axis=1).mean()), d.argmin(axis=1)


def _farthest_point_init(points, k, first):
    chosen = [first]
    nearest = _distances(points, points[[first]])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, _distances(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iters):
    objective, assign = _objective(points, centroids)
    history = [objective]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        updated = centroids.copy()
        for c in range(len(centroids)):
            members = assign == c
            if members.any():
                updated[c] = points[members].mean(axis=0)
            else:
                d = _distances(points, centroids)[np.arange(len(points)), assign]
                far = int(np.argmax(d))
                logger.info("kmeans: cluster %d is empty, re-seeding from point %d", c, far)
                updated[c] = points[far]
                assign = assign.copy()
                assign[far] = c
        new_objective, new_assign = _objective(points, updated)
        if new_objective > objective:
            break
        centroids, objective = updated, new_objective
        history.append(objective)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    _, assign = _objective(points, centroids)
    return centroids, objective, history, assign, iterations


def kmeans_fit(dims, k=5, seed=0, max_iters=300, n_init=1):
    """
    Lloyd iteration on (w, h) pairs with seeded farthest-point initialization.

    Args:
        dims: (n, 2) positive box extents.
        k (int): Number of priors; must not exceed the number of distinct extents.
        seed (int): Seed for the choice of the first point of each start.
        max_iters (int): Iteration cap per start.
        n_init (int): Number of starts; the lowest final objective wins.

    Returns:
        KMeansResult: priors in canonical order with the per-iteration objective history
        of the winning start (non-increasing).
    """
    points = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise ConfigError("kmeans: no box extents given")
    if np.any(points <= 0):
        raise ConfigError("kmeans: all box extents must be positive")
    distinct = len(np.unique(points, axis=0))
    if k < 1 or k > distinct:
        raise ConfigError(f"kmeans: k={k} but only {distinct} distinct box extents")

    rng = np.random.default_rng(seed)
    starts = rng.choice(len(points), size=min(max(1, n_init), len(points)), replace=False)
    best = None
    for first in starts:
        init = _farthest_point_init(points, k, int(first))
        fit = _lloyd(points, init, max_iters)
        if best is None or fit[1] < best[1]:
            best = fit
    centroids, objective, history, assign, iterations = best

    order = sorted(range(k), key=lambda c: (centroids[c, 0] * centroids[c, 1], centroids[c, 0]))
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    anchors = AnchorSet.from_priors([tuple(centroids[c]) for c in order])
    return KMeansResult(anchors, objective, history, remap[assign], iterations)


def kmeans_anchors(dims, k=5, seed=0, max_iters=300, n_init=1, stride=1.0):
    """K-means priors; extents are divided by stride so priors come out in cell units."""
    points = np.asarray(dims, dtype=np.float64).reshape(-1, 2) / stride
    return kmeans_fit(points, k=k, seed=seed, max_iters=max_iters, n_init=n_init).anchors
