"""Windowed motion features and the map back to world trajectories.

A motion window is H frames of a compact per-frame feature vector:

    [forward delta, lateral delta, yaw delta, root height, K x 3 offsets]

Deltas are expressed in the previous frame's heading frame; keypoint offsets
are root-relative in the current heading frame. `decode` inverts this layout
into world-frame root poses and keypoints, and is written against the
dual-backend ops so gradients can flow from trajectory-space losses back to
(standardized) feature space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import K
from .world import wrap_angle

FEAT_DIM = 4 + K * 3


@dataclass
class Standardizer:
    mean: np.ndarray  # (FEAT_DIM,)
    std: np.ndarray  # (FEAT_DIM,)

    @classmethod
    def fit(cls, features: np.ndarray, floor: float = 1e-6):
        """Per-dimension statistics over stacked frames (N, FEAT_DIM)."""
        feats = features.reshape(-1, FEAT_DIM)
        return cls(feats.mean(axis=0), np.maximum(feats.std(axis=0), floor))

    def apply(self, features):
        return (features - self.mean) / self.std

    def invert(self, features):
        # dual-backend: works on arrays and graph tensors alike
        return ad.add(ad.mul(features, self.std), self.mean)

    def to_arrays(self):
        return np.stack([self.mean, self.std])

    @classmethod
    def from_arrays(cls, arr):
        return cls(np.asarray(arr[0], float), np.asarray(arr[1], float))

    @classmethod
    def identity(cls):
        return cls(np.zeros(FEAT_DIM), np.ones(FEAT_DIM))


@dataclass
class Condition:
    """Planner conditioning: a style token and an optional target point for a
    chosen keypoint (pelvis by default)."""

    style: int | None = None
    target: np.ndarray | None = None  # (2,) anchor-frame xy
    target_joint: int = 0

    def dropped(self):
        return Condition(style=None, target=None)


@dataclass
class Anchor:
    """World pose the first window frame is expressed against."""

    xy: np.ndarray  # (2,)
    yaw: float

    @classmethod
    def origin(cls):
        return cls(np.zeros(2), 0.0)


def encode(root_pos: np.ndarray, yaw: np.ndarray, kpts: np.ndarray, anchor: Anchor) -> np.ndarray:
    """World trajectory -> (T, FEAT_DIM) features. Pure numpy."""
    root_pos = np.asarray(root_pos, float)
    yaw = np.asarray(yaw, float)
    T = len(yaw)
    prev_yaw = np.concatenate([[anchor.yaw], yaw[:-1]])
    prev_xy = np.vstack([anchor.xy, root_pos[:-1, :2]])

    dyaw = wrap_angle(yaw - prev_yaw)
    d_world = root_pos[:, :2] - prev_xy
    c, s = np.cos(prev_yaw), np.sin(prev_yaw)
    fwd = c * d_world[:, 0] + s * d_world[:, 1]
    lat = -s * d_world[:, 0] + c * d_world[:, 1]

    rel = kpts - root_pos[:, None, :]
    cy, sy = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    off = np.empty_like(rel)
    off[..., 0] = cy * rel[..., 0] + sy * rel[..., 1]
    off[..., 1] = -sy * rel[..., 0] + cy * rel[..., 1]
    off[..., 2] = rel[..., 2]

    return np.concatenate(
        [fwd[:, None], lat[:, None], dyaw[:, None], root_pos[:, 2:3], off.reshape(T, -1)], axis=1
    )


def decode(features, anchor: Anchor, standardizer: Standardizer | None = None):
    """Features -> (root_pos (T,3), yaw (T,), kpts (T,K,3)) in world frame.

    Differentiable end to end when `features` is a graph tensor; pass the
    standardizer to fold its inversion into the same graph.
    """
    f = standardizer.invert(features) if standardizer is not None else features
    T = f.shape[0]

    dyaw = f[:, 2]
    yaw = ad.add(ad.cumsum(dyaw), anchor.yaw)
    prev_yaw = ad.sub(yaw, dyaw)

    c, s = ad.cos(prev_yaw), ad.sin(prev_yaw)
    dx = ad.sub(ad.mul(c, f[:, 0]), ad.mul(s, f[:, 1]))
    dy = ad.add(ad.mul(s, f[:, 0]), ad.mul(c, f[:, 1]))
    x = ad.add(ad.cumsum(dx), anchor.xy[0])
    y = ad.add(ad.cumsum(dy), anchor.xy[1])
    z = f[:, 3]

    off = ad.reshape(f[:, 4:], (T, K, 3))
    cy = ad.reshape(ad.cos(yaw), (T, 1))
    sy = ad.reshape(ad.sin(yaw), (T, 1))
    ox, oy, oz = off[:, :, 0], off[:, :, 1], off[:, :, 2]
    kx = ad.add(ad.sub(ad.mul(cy, ox), ad.mul(sy, oy)), ad.reshape(x, (T, 1)))
    ky = ad.add(ad.add(ad.mul(sy, ox), ad.mul(cy, oy)), ad.reshape(y, (T, 1)))
    kz = ad.add(oz, ad.reshape(z, (T, 1)))

    root = ad.stack([x, y, z], axis=-1)
    kpts = ad.stack([kx, ky, kz], axis=-1)
    return root, yaw, kpts


def chain_anchor(features: np.ndarray, anchor: Anchor) -> Anchor:
    """Anchor for the window that follows `features` (its last root pose)."""
    root, yaw, _ = decode(features, anchor)
    return Anchor(np.asarray(root[-1, :2], float).copy(), float(wrap_angle(yaw[-1])))
