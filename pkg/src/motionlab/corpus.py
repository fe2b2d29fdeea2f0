"""Scripted motion corpus for planner training.

Windows are generated kinematically (no physics): a heading/speed script
drives the root, gait phase swings the limbs, and the same forward kinematics
as the simulator poses the keypoints. Four locomotion styles cover steady
gaits; sit / getup / touch windows script a scene interaction around a target
point. Each item stores `context + horizon` frames of features plus the style
token and the target expressed in the anchor's heading frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GAIT_TOKENS, STYLE_TOKENS, K
from .motionrep import FEAT_DIM, Anchor, Standardizer, encode
from .rng import RngStream
from .world import BatchState, keypoints_batch, support_height

SIT_CROUCH = 1.15  # hip angle whose support height lands inside the sit band
TOUCH_RAISE = -2.0  # wrist-joint angle that brings the hand forward and up


@dataclass
class Corpus:
    features: np.ndarray  # (N, P+H, FEAT_DIM) float32, unstandardized
    style: np.ndarray  # (N,) int16 token ids
    target: np.ndarray  # (N, 2) float32, anchor-frame xy
    target_joint: np.ndarray  # (N,) int16 keypoint index the target refers to
    stats: Standardizer
    context: int
    horizon: int

    def __len__(self):
        return len(self.style)

    def save(self, path):
        np.savez_compressed(
            path,
            features=self.features,
            style=self.style,
            target=self.target,
            target_joint=self.target_joint,
            stats=self.stats.to_arrays(),
            layout=np.array([self.context, self.horizon]),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(
                z["features"],
                z["style"],
                z["target"],
                z["target_joint"],
                Standardizer.from_arrays(z["stats"]),
                int(z["layout"][0]),
                int(z["layout"][1]),
            )


def _pose_frames(xy, yaw, joints):
    """FK the scripted channels into keypoints; root z follows leg support."""
    T = len(yaw)
    z = support_height(joints, 0.9)
    pos = np.concatenate([xy, z[:, None]], axis=1)
    batch = BatchState(
        pos=pos,
        yaw=yaw,
        vel=np.zeros((T, 3)),
        yaw_rate=np.zeros(T),
        joints=joints,
        joint_vel=np.zeros((T, K - 1)),
        phase=np.zeros(T),
    )
    return pos, keypoints_batch(batch)


def _gait_joints(phase, speed, swing_scale=0.22, arm_scale=0.5):
    """Sinusoidal limb swing: hips out of phase, arms countering."""
    amp = swing_scale * np.sqrt(np.maximum(speed, 0.0))
    j = np.zeros((len(phase), K - 1))
    j[:, 0] = amp * np.sin(phase)
    j[:, 1] = amp * np.sin(phase + np.pi)
    j[:, 2] = arm_scale * amp * np.sin(phase + np.pi)
    j[:, 3] = arm_scale * amp * np.sin(phase)
    return j


def _script_walk(rng: RngStream, T, base_speed, curvature_noise, dt):
    """Wandering locomotion: smooth speed and heading noise."""
    speed = base_speed * (1.0 + 0.08 * _smooth_noise(rng, T))
    turn = curvature_noise * _smooth_noise(rng, T)
    yaw = float(rng.uniform(-np.pi, np.pi)) + np.cumsum(turn * dt)
    xy = np.cumsum(np.stack([np.cos(yaw), np.sin(yaw)], -1) * speed[:, None] * dt, axis=0)
    phase = np.cumsum(5.5 * speed * dt)
    return xy, yaw, speed, phase


def _smooth_noise(rng: RngStream, T, tau=10.0):
    """Low-pass filtered unit noise."""
    raw = rng.normal((T,))
    out = np.zeros(T)
    a = 1.0 / tau
    for t in range(1, T):
        out[t] = (1 - a) * out[t - 1] + a * raw[t] * np.sqrt(tau)
    return out


def _ramp(T, start, end):
    """Smoothstep schedule over [start, end) frame indices."""
    t = np.clip((np.arange(T) - start) / max(end - start, 1), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_gait_window(rng: RngStream, style: int, cfg) -> tuple[np.ndarray, np.ndarray]:
    total = cfg["planner"]["context"] + cfg["planner"]["window"] + 1
    dt = cfg["world"]["dt"]
    base = cfg["corpus"]["speed"][STYLE_TOKENS[style]]
    xy, yaw, speed, phase = _script_walk(rng, total, base, cfg["corpus"]["curvature_noise"], dt)
    joints = _gait_joints(phase, speed)
    pos, kpts = _pose_frames(xy, yaw, joints)
    anchor = Anchor(pos[0, :2].copy(), float(yaw[0]))
    feats = encode(pos[1:], yaw[1:], kpts[1:], anchor)
    target = _to_anchor_frame(pos[-1, :2], anchor)
    return feats, target


def generate_interaction_window(rng: RngStream, style: int, cfg) -> tuple[np.ndarray, np.ndarray]:
    total = cfg["planner"]["context"] + cfg["planner"]["window"] + 1
    dt = cfg["world"]["dt"]
    name = STYLE_TOKENS[style]

    approach = _ramp(total, int(total * 0.15), int(total * 0.55))
    act = _ramp(total, int(total * 0.55), int(total * 0.9))

    if name == "getup":
        # start seated, rise, then walk off
        speed = 1.0 * act * (1.0 + 0.05 * _smooth_noise(rng, total))
        crouch = SIT_CROUCH * (1.0 - approach)
    else:
        # walk in, decelerate, then perform
        speed = 1.0 * (1.0 - approach) * (1.0 + 0.05 * _smooth_noise(rng, total))
        crouch = SIT_CROUCH * act if name == "sit" else np.zeros(total)

    turn = 0.2 * _smooth_noise(rng, total)
    yaw = float(rng.uniform(-np.pi, np.pi)) + np.cumsum(turn * dt)
    xy = np.cumsum(np.stack([np.cos(yaw), np.sin(yaw)], -1) * speed[:, None] * dt, axis=0)
    phase = np.cumsum(5.5 * speed * dt)

    joints = _gait_joints(phase, speed)
    joints[:, 0] += crouch
    joints[:, 1] += crouch
    if name == "touch":
        joints[:, 3] += 0.5 * act  # shoulder forward
        joints[:, 6] += TOUCH_RAISE * act  # hand up toward the target

    pos, kpts = _pose_frames(xy, yaw, joints)
    anchor = Anchor(pos[0, :2].copy(), float(yaw[0]))
    feats = encode(pos[1:], yaw[1:], kpts[1:], anchor)

    if name == "touch":
        target_world = kpts[-1, 7, :2]  # where the raised hand ends up
    else:
        target_world = pos[-1, :2]
    return feats, _to_anchor_frame(target_world, anchor)


def _to_anchor_frame(xy_world, anchor: Anchor):
    d = np.asarray(xy_world, float) - anchor.xy
    c, s = np.cos(anchor.yaw), np.sin(anchor.yaw)
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])


def build_corpus(cfg, seed: int) -> Corpus:
    """Scripted corpus: gait windows split exactly evenly over the four gait
    tokens, plus interaction windows over sit / getup / touch."""
    rng = RngStream(seed)
    n_gait = cfg["corpus"]["windows"]
    n_inter = cfg["corpus"]["interaction_windows"]

    gait_styles = np.arange(n_gait) % len(GAIT_TOKENS)
    gait_styles = gait_styles[rng.permutation(n_gait)]
    inter_styles = len(GAIT_TOKENS) + (np.arange(n_inter) % 3)
    inter_styles = inter_styles[rng.permutation(n_inter)]

    touch_token = STYLE_TOKENS.index("touch")
    feats, styles, targets, joints = [], [], [], []
    for i, style in enumerate(gait_styles):
        f, t = generate_gait_window(rng.spawn(i), int(style), cfg)
        feats.append(f)
        styles.append(style)
        targets.append(t)
        joints.append(0)
    for i, style in enumerate(inter_styles):
        f, t = generate_interaction_window(rng.spawn(n_gait + i), int(style), cfg)
        feats.append(f)
        styles.append(style)
        targets.append(t)
        joints.append(7 if style == touch_token else 0)

    features = np.stack(feats).astype(np.float32)
    stats = Standardizer.fit(features.astype(np.float64))
    return Corpus(
        features=features,
        style=np.asarray(styles, dtype=np.int16),
        target=np.stack(targets).astype(np.float32),
        target_joint=np.asarray(joints, dtype=np.int16),
        stats=stats,
        context=cfg["planner"]["context"],
        horizon=cfg["planner"]["window"],
    )


def sample_batch(corpus: Corpus, rng: RngStream, batch: int):
    """Standardized training batch: past context, clean horizon, conditions."""
    idx = rng.integers(0, len(corpus), (batch,))
    feats = corpus.features[idx].astype(np.float64)
    z = corpus.stats.apply(feats.reshape(-1, FEAT_DIM)).reshape(feats.shape)
    P = corpus.context
    return {
        "context": z[:, :P],
        "x0": z[:, P:],
        "style": corpus.style[idx].astype(int),
        "target": corpus.target[idx].astype(np.float64),
        "target_joint": corpus.target_joint[idx].astype(int),
    }
