"""Deterministic planar physics for a stick-figure agent.

The agent is a kinematic tree riding on a dynamic root: the root's planar
velocity, yaw rate, and height respond to servo targets, while the seven
non-root joints are PD-driven angles about their parent's lateral axis.
Ground contact artifacts (penetration, floating, skating) are measured from
the keypoints and from two gait-phase contact markers that proxy the feet.

All step math is vectorized over a batch axis; `step` is the single-agent
wrapper around the same kernel, so batched rollouts and the per-agent
contract share one implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .config import K

# tree layout: parent index and rest offset (from parent) per keypoint
PARENTS = np.array([-1, 0, 0, 0, 0, 0, 3, 4])
REST_OFFSETS = np.array(
    [
        [0.0, 0.0, 0.0],  # pelvis (root)
        [0.0, 0.10, -0.10],  # left hip
        [0.0, -0.10, -0.10],  # right hip
        [0.0, 0.18, 0.45],  # left shoulder
        [0.0, -0.18, 0.45],  # right shoulder
        [0.0, 0.0, 0.65],  # head
        [0.0, 0.04, -0.50],  # left wrist
        [0.0, -0.04, -0.50],  # right wrist
    ]
)
N_JOINTS = K - 1
ACTION_DIM = 3 + N_JOINTS  # target vx, vy, yaw rate + joint targets


class SimulationFault(RuntimeError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass
class AgentState:
    pos: np.ndarray  # (3,) meters
    yaw: float
    vel: np.ndarray  # (3,) m/s
    yaw_rate: float
    joints: np.ndarray  # (N_JOINTS,) radians
    joint_vel: np.ndarray  # (N_JOINTS,) rad/s
    phase: float  # gait phase, radians

    @classmethod
    def rest(cls, stand_height=0.9, pos_xy=(0.0, 0.0), yaw=0.0):
        return cls(
            pos=np.array([pos_xy[0], pos_xy[1], stand_height]),
            yaw=float(yaw),
            vel=np.zeros(3),
            yaw_rate=0.0,
            joints=np.zeros(N_JOINTS),
            joint_vel=np.zeros(N_JOINTS),
            phase=0.0,
        )

    def copy(self):
        return AgentState(self.pos.copy(), self.yaw, self.vel.copy(), self.yaw_rate,
                          self.joints.copy(), self.joint_vel.copy(), self.phase)


@dataclass
class Action:
    target_vel: np.ndarray  # (2,) m/s, heading-local (x forward, y left)
    target_yaw_rate: float
    target_joints: np.ndarray  # (N_JOINTS,) radians

    def to_array(self):
        return np.concatenate([self.target_vel, [self.target_yaw_rate], self.target_joints])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[:2].copy(), float(a[2]), a[3:].copy())

    @classmethod
    def zero(cls):
        return cls(np.zeros(2), 0.0, np.zeros(N_JOINTS))


@dataclass
class ContactReport:
    penetration: float  # depth below ground of the lowest keypoint
    float_height: float  # clearance of the lowest contact marker
    skate: float  # horizontal marker displacement while in contact
    overlap: bool  # pelvis disc intersects an obstacle footprint
    out_of_bounds: bool = False


@dataclass
class ObstacleField:
    boxes: np.ndarray  # (M, 4): center x, center y, half x, half y
    bounds: np.ndarray  # (4,): xmin, ymin, xmax, ymax
    ground: float = 0.0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.bounds = np.asarray(self.bounds, dtype=float)
        if len(self.boxes) and np.any(self.boxes[:, 2:] <= 0):
            raise ValueError("obstacle half-extents must be positive")
        if len(self.boxes):
            lo = self.boxes[:, :2] - self.boxes[:, 2:]
            hi = self.boxes[:, :2] + self.boxes[:, 2:]
            if np.any(lo < self.bounds[:2] - 1e-9) or np.any(hi > self.bounds[2:] + 1e-9):
                raise ValueError("obstacles must lie inside scene bounds")

    @classmethod
    def empty(cls, half_extent=50.0):
        return cls(np.zeros((0, 4)), np.array([-half_extent, -half_extent, half_extent, half_extent]))

    def save(self, path):
        doc = {
            "bounds": [float(v) for v in self.bounds],
            "ground": float(self.ground),
            "obstacles": [
                {"center": [float(b[0]), float(b[1])], "half": [float(b[2]), float(b[3])]}
                for b in self.boxes
            ],
        }
        with open(path, "w") as f:
            yaml.safe_dump(doc, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = yaml.safe_load(f)
        boxes = [[*o["center"], *o["half"]] for o in doc.get("obstacles", [])]
        return cls(np.asarray(boxes, dtype=float).reshape(-1, 4), np.asarray(doc["bounds"], float),
                   float(doc.get("ground", 0.0)))


# -- batched state -----------------------------------------------------------


class BatchState:
    """Struct-of-arrays state for N agents advancing in lockstep."""

    FIELDS = ("pos", "yaw", "vel", "yaw_rate", "joints", "joint_vel", "phase")

    def __init__(self, pos, yaw, vel, yaw_rate, joints, joint_vel, phase):
        self.pos = pos
        self.yaw = yaw
        self.vel = vel
        self.yaw_rate = yaw_rate
        self.joints = joints
        self.joint_vel = joint_vel
        self.phase = phase

    @property
    def n(self):
        return len(self.yaw)

    @classmethod
    def from_states(cls, states):
        return cls(
            np.stack([s.pos for s in states]),
            np.array([s.yaw for s in states]),
            np.stack([s.vel for s in states]),
            np.array([s.yaw_rate for s in states]),
            np.stack([s.joints for s in states]),
            np.stack([s.joint_vel for s in states]),
            np.array([s.phase for s in states]),
        )

    def get(self, i) -> AgentState:
        return AgentState(self.pos[i].copy(), float(self.yaw[i]), self.vel[i].copy(),
                          float(self.yaw_rate[i]), self.joints[i].copy(),
                          self.joint_vel[i].copy(), float(self.phase[i]))

    def set(self, i, s: AgentState):
        self.pos[i] = s.pos
        self.yaw[i] = s.yaw
        self.vel[i] = s.vel
        self.yaw_rate[i] = s.yaw_rate
        self.joints[i] = s.joints
        self.joint_vel[i] = s.joint_vel
        self.phase[i] = s.phase

    def copy(self):
        return BatchState(*(getattr(self, f).copy() for f in self.FIELDS))


# -- kinematics --------------------------------------------------------------


def _rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    zero = np.zeros_like(c)
    one = np.ones_like(c)
    return np.stack(
        [np.stack([c, -s, zero], -1), np.stack([s, c, zero], -1), np.stack([zero, zero, one], -1)],
        -2,
    )


def _rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    zero = np.zeros_like(c)
    one = np.ones_like(c)
    return np.stack(
        [np.stack([c, zero, s], -1), np.stack([zero, one, zero], -1), np.stack([-s, zero, c], -1)],
        -2,
    )


def keypoints_batch(state: BatchState) -> np.ndarray:
    """Forward kinematics for all agents: (N, K, 3) world positions.

    Joint k's angle rotates its own rest-pose bone about the parent frame's
    y-axis; the root contributes translation plus yaw.
    """
    n = state.n
    pts = np.zeros((n, K, 3))
    rots = np.zeros((n, K, 3, 3))
    pts[:, 0] = state.pos
    rots[:, 0] = _rot_z(state.yaw)
    for k in range(1, K):
        pa = PARENTS[k]
        local = rots[:, pa] @ _rot_y(state.joints[:, k - 1])
        pts[:, k] = pts[:, pa] + (local @ REST_OFFSETS[k])
        rots[:, k] = local
    return pts


def keypoints(state: AgentState) -> np.ndarray:
    """FK for one agent: (K, 3) world keypoint positions."""
    return keypoints_batch(BatchState.from_states([state]))[0]


def support_height(joints, stand_height):
    """Pelvis height the legs can sustain, given the hip crouch angles."""
    return stand_height * 0.5 * (np.cos(joints[..., 0]) + np.cos(joints[..., 1]))


def markers_batch(state: BatchState, kpts: np.ndarray, cfg_world: dict) -> np.ndarray:
    """Ground-contact markers (N, 2, 3): foot proxies under the hips.

    Marker height combines any root float (root above its leg support) with a
    gait-phase lift; the horizontal offset swings along the heading so the
    stance marker is near world-stationary at matched cadence.
    """
    lift = cfg_world["marker_lift"]
    amp = np.pi / (2.0 * cfg_world["cadence_per_speed"])
    base = np.maximum(0.0, state.pos[:, 2] - support_height(state.joints, cfg_world["stand_height"]))
    heading = np.stack([np.cos(state.yaw), np.sin(state.yaw)], -1)
    out = np.zeros((state.n, 2, 3))
    for leg, phase_off in ((0, 0.0), (1, np.pi)):
        phase = state.phase + phase_off
        hip = kpts[:, 1 + leg]
        out[:, leg, :2] = hip[:, :2] + heading * (amp * np.cos(phase))[:, None]
        out[:, leg, 2] = base + lift * np.maximum(0.0, -np.sin(phase))
    return out


# -- stepping ----------------------------------------------------------------


def clamp_actions(actions: np.ndarray, cfg_world: dict) -> np.ndarray:
    a = np.array(actions, dtype=float)
    a[..., :2] = np.clip(a[..., :2], -cfg_world["max_speed"], cfg_world["max_speed"])
    a[..., 2] = np.clip(a[..., 2], -cfg_world["max_yaw_rate"], cfg_world["max_yaw_rate"])
    a[..., 3:] = np.clip(a[..., 3:], -cfg_world["max_joint_angle"], cfg_world["max_joint_angle"])
    return a


def step_batch(state: BatchState, actions: np.ndarray, dt: float, cfg_world: dict,
               field: ObstacleField | None = None):
    """Advance all agents one semi-implicit Euler step.

    Returns (next BatchState, report dict of arrays). Raises SimulationFault
    on non-finite actions.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    actions = np.asarray(actions, dtype=float)
    if not np.isfinite(actions).all():
        raise SimulationFault("non-finite action")
    actions = clamp_actions(actions, cfg_world)

    kp = cfg_world["kp"]
    kd = cfg_world["kd_factor"] * np.sqrt(kp)
    g_root = cfg_world["root_gain"]

    prev_kpts = keypoints_batch(state)
    prev_markers = markers_batch(state, prev_kpts, cfg_world)

    nxt = state.copy()

    # joints: PD about the target angle, critically damped
    acc = kp * (actions[:, 3:] - nxt.joints) - kd * nxt.joint_vel
    nxt.joint_vel = nxt.joint_vel + acc * dt
    nxt.joints = nxt.joints + nxt.joint_vel * dt
    limit = cfg_world["max_joint_angle"]
    hit = np.abs(nxt.joints) > limit
    nxt.joints = np.clip(nxt.joints, -limit, limit)
    nxt.joint_vel = np.where(hit, 0.0, nxt.joint_vel)

    # yaw: velocity servo
    nxt.yaw_rate = nxt.yaw_rate + g_root * (actions[:, 2] - nxt.yaw_rate) * dt
    nxt.yaw = wrap_angle(nxt.yaw + nxt.yaw_rate * dt)

    # planar root: velocity servo toward the heading-local target; ground
    # friction damps the residual, so v' = tgt + (v - tgt) * r with
    # r = (1 - root_gain*dt) / (1 + friction*dt)
    c, s = np.cos(nxt.yaw), np.sin(nxt.yaw)
    tgt_world = np.stack(
        [c * actions[:, 0] - s * actions[:, 1], s * actions[:, 0] + c * actions[:, 1]], -1
    )
    decay = (1.0 - g_root * dt) / (1.0 + cfg_world["friction"] * dt)
    vel_xy = tgt_world + (nxt.vel[:, :2] - tgt_world) * decay
    nxt.vel[:, :2] = vel_xy

    # vertical root: damped spring to the leg-support height
    support = support_height(nxt.joints, cfg_world["stand_height"])
    az = kp * (support - nxt.pos[:, 2]) - kd * nxt.vel[:, 2]
    nxt.vel[:, 2] = nxt.vel[:, 2] + az * dt

    nxt.pos = nxt.pos + nxt.vel * dt

    # ground: clamp root, zero vertical velocity on contact
    below = nxt.pos[:, 2] < 0.0
    nxt.pos[:, 2] = np.maximum(nxt.pos[:, 2], 0.0)
    nxt.vel[:, 2] = np.where(below, 0.0, nxt.vel[:, 2])

    # gait phase follows actual root speed
    speed = np.linalg.norm(vel_xy, axis=-1)
    nxt.phase = np.mod(nxt.phase + cfg_world["cadence_per_speed"] * speed * dt, 2.0 * np.pi)

    out_of_bounds = np.zeros(state.n, dtype=bool)
    overlap_flags = np.zeros(state.n, dtype=bool)
    if field is not None:
        lo, hi = field.bounds[:2], field.bounds[2:]
        clamped = np.clip(nxt.pos[:, :2], lo, hi)
        out_of_bounds = np.any(clamped != nxt.pos[:, :2], axis=-1)
        nxt.pos[:, :2] = clamped
        overlap_flags = overlap_batch(nxt.pos[:, :2], field, cfg_world["pelvis_radius"])

    kpts = keypoints_batch(nxt)
    markers = markers_batch(nxt, kpts, cfg_world)
    penetration = np.maximum(0.0, -kpts[:, :, 2].min(axis=-1))
    float_height = markers[:, :, 2].min(axis=-1)

    band = cfg_world["contact_band"]
    in_contact = (markers[:, :, 2] <= band) & (prev_markers[:, :, 2] <= band)
    disp = np.linalg.norm(markers[:, :, :2] - prev_markers[:, :, :2], axis=-1)
    skate = np.sum(np.where(in_contact, disp, 0.0), axis=-1)

    report = {
        "penetration": penetration,
        "float_height": float_height,
        "skate": skate,
        "overlap": overlap_flags,
        "out_of_bounds": out_of_bounds,
    }
    return nxt, report


def step(state: AgentState, action: Action, dt: float, cfg_world: dict,
         field: ObstacleField | None = None):
    """Single-agent step; see `step_batch` for the dynamics."""
    batch = BatchState.from_states([state])
    nxt, rep = step_batch(batch, action.to_array()[None, :], dt, cfg_world, field)
    report = ContactReport(
        penetration=float(rep["penetration"][0]),
        float_height=float(rep["float_height"][0]),
        skate=float(rep["skate"][0]),
        overlap=bool(rep["overlap"][0]),
        out_of_bounds=bool(rep["out_of_bounds"][0]),
    )
    return nxt.get(0), report


def overlap_batch(pelvis_xy: np.ndarray, field: ObstacleField, radius: float) -> np.ndarray:
    """True where the pelvis disc intersects any box footprint (closed boundary)."""
    if len(field.boxes) == 0:
        return np.zeros(len(pelvis_xy), dtype=bool)
    delta = np.abs(pelvis_xy[:, None, :] - field.boxes[None, :, :2])
    gap = np.maximum(delta - field.boxes[None, :, 2:], 0.0)
    dist = np.linalg.norm(gap, axis=-1)
    return np.any(dist <= radius + 1e-12, axis=-1)


def overlap(state: AgentState, field: ObstacleField, radius: float = 0.25) -> bool:
    return bool(overlap_batch(state.pos[None, :2], field, radius)[0])


# -- trace output ------------------------------------------------------------


def write_trace(path, frames):
    """Line-delimited trace: one JSON record per frame.

    Each frame is (index, AgentState, keypoints (K,3), markers (2,3),
    ContactReport).
    """
    with open(path, "w") as f:
        for idx, state, kpts, markers, report in frames:
            rec = {
                "frame": int(idx),
                "root": [*map(float, state.pos), float(state.yaw)],
                "keypoints": np.asarray(kpts).round(6).tolist(),
                "markers": np.asarray(markers).round(6).tolist(),
                "report": {
                    "penetration": float(report.penetration),
                    "float_height": float(report.float_height),
                    "skate": float(report.skate),
                    "overlap": bool(report.overlap),
                },
            }
            f.write(json.dumps(rec) + "\n")


def read_trace(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
