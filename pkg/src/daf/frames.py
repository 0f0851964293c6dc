"""Egocentric <-> global planar transforms.

The egocentric frame has +x along the agent heading and +y to its left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta: float) -> float:
    """Normalize to (-pi, pi]."""
    t = math.fmod(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    elif t > math.pi:
        t -= 2.0 * math.pi
    return t


@dataclass(frozen=True)
class FrameTransform:
    cx: float
    cy: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_pose(cls, pose) -> "FrameTransform":
        x, y, th = pose
        return cls(float(x), float(y), float(th))


def r2g(xy, tf: FrameTransform) -> np.ndarray:
    """Rotate by the agent heading, then translate by its position."""
    p = np.asarray(xy, dtype=np.float64)
    c, s = math.cos(tf.theta), math.sin(tf.theta)
    x, y = p[..., 0], p[..., 1]
    return np.stack([c * x - s * y + tf.cx, s * x + c * y + tf.cy], axis=-1)


def g2r(xy, tf: FrameTransform) -> np.ndarray:
    p = np.asarray(xy, dtype=np.float64)
    c, s = math.cos(tf.theta), math.sin(tf.theta)
    dx, dy = p[..., 0] - tf.cx, p[..., 1] - tf.cy
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)
