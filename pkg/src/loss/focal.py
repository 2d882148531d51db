"""Focal loss and smooth L1, with their derivatives for the multi-part objective."""
import dataclasses
import os

import numpy as np
from scipy.special import expit

from src.utils.errors import ConfigError, NumericError

P_CLAMP = 1e-7


@dataclasses.dataclass(frozen=True)
class FocalConfig:
    """γ focuses on hard examples; α scales the whole term. γ=0, α=1 is cross-entropy."""
    gamma: float = 2.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"FocalConfig.gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"FocalConfig.alpha must be in (0, 1], got {self.alpha}")


CROSS_ENTROPY = FocalConfig(gamma=0.0, alpha=1.0)


def _debug_enabled(debug):
    if debug is not None:
        return debug
    return os.environ.get("DETNET_DEBUG", "") not in ("", "0")


def focal_loss(p_t, cfg=FocalConfig(), debug=None):
    """
    -α (1 - p_t)^γ ln(p_t), with p_t clamped to [1e-7, 1 - 1e-7].

    Accepts scalars or arrays. In debug mode (debug=True or DETNET_DEBUG=1) p_t outside
    (0, 1) raises NumericError instead of being clamped silently.
    """
    p = np.asarray(p_t, dtype=np.float64)
    if _debug_enabled(debug) and np.any((p <= 0) | (p >= 1)):
        raise NumericError(f"focal_loss: p_t outside (0, 1): {p[(p <= 0) | (p >= 1)].ravel()[:5]}")
    p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    loss = -cfg.alpha * (1 - p) ** cfg.gamma * np.log(p)
    return float(loss) if loss.ndim == 0 else loss


def focal_slope(p_t, cfg):
    """d FL(σ(s)) / ds at p_t = σ(s): α [γ p (1-p)^γ ln p - (1-p)^(γ+1)]."""
    p = np.clip(np.asarray(p_t, dtype=np.float64), P_CLAMP, 1 - P_CLAMP)
    q = 1 - p
    return cfg.alpha * (cfg.gamma * p * q ** cfg.gamma * np.log(p) - q ** (cfg.gamma + 1))


def binary_focal(logits, targets, cfg):
    """
    Focal loss of logistic outputs against targets in [0, 1].

    loss = y FL(σ(z)) + (1 - y) FL(σ(-z)); a hard target y=1 gives p_t = σ(z) and y=0
    gives p_t = 1 - σ(z).

    Returns:
        tuple: (elementwise loss, elementwise d loss / d logits)
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p_pos, p_neg = expit(z), expit(-z)
    loss = y * focal_loss(p_pos, cfg, debug=False) + (1 - y) * focal_loss(p_neg, cfg, debug=False)
    grad = y * focal_slope(p_pos, cfg) - (1 - y) * focal_slope(p_neg, cfg)
    return loss, grad


def smooth_l1(x, halved=False):
    """
    x² for |x| < 1 and |x| - 0.5 otherwise.

    halved=True selects the conventional 0.5·x² quadratic branch, which makes the
    function continuous at |x| = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    quad = 0.5 * x * x if halved else x * x
    out = np.where(a < 1, quad, a - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x, halved=False):
    x = np.asarray(x, dtype=np.float64)
    quad = x if halved else 2 * x
    return np.where(np.abs(x) < 1, quad, np.sign(x))
