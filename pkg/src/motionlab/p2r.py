"""Keypoint positions to joint rotations via twist-swing decomposition.

A joint's relative rotation is factored as R = S(u, v) * T(u, phi): the
minimal "swing" taking the rest bone direction u to the observed direction v,
composed with a residual "twist" about u. Swing follows from positions alone;
the twist angle is unobservable from the chain endpoint and is predicted by a
small network from the canonical (root-relative, yaw-removed) pose. A second
head regresses the 6D rotation encoding as a training regularizer.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .config import K
from .nets import mlp_forward, mlp_init, raw
from .params import AdamState, ParamSet, adam_step_from_grads
from .rng import RngStream
from .world import PARENTS, REST_OFFSETS, keypoints_batch, BatchState, AgentState

N_JOINTS = K - 1
BONE_DIRS = REST_OFFSETS[1:] / np.linalg.norm(REST_OFFSETS[1:], axis=1, keepdims=True)
BONE_LENS = np.linalg.norm(REST_OFFSETS[1:], axis=1)


# -- rotation utilities ------------------------------------------------------


def axis_angle(axis, angle):
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, float)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def swing_between(u, v):
    """Minimal rotation taking unit vector u onto unit vector v."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    d = float(np.clip(u @ v, -1.0, 1.0))
    axis = np.cross(u, v)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        if d > 0:
            return np.eye(3)
        # antipodal: rotate half-turn about any axis perpendicular to u
        perp = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u, [0.0, 1.0, 0.0])
        return axis_angle(perp / np.linalg.norm(perp), np.pi)
    return axis_angle(axis / n, np.arctan2(n, d))


def twist_angle(rot, u):
    """Angle of the twist factor of `rot` about axis u."""
    v = rot @ u
    residual = swing_between(u, v).T @ rot  # pure rotation about u
    w = np.cross(u, [1.0, 0.0, 0.0])
    if np.linalg.norm(w) < 1e-6:
        w = np.cross(u, [0.0, 1.0, 0.0])
    w /= np.linalg.norm(w)
    rw = residual @ w
    return float(np.arctan2(u @ np.cross(w, rw), w @ rw))


def twist_swing(rot, u):
    """Factor rot = swing @ twist about rest direction u; returns (S, T, phi)."""
    phi = twist_angle(rot, u)
    twist = axis_angle(u, phi)
    swing = swing_between(u, rot @ u)
    return swing, twist, phi


def rot6d(rot):
    """First two columns, the standard continuous 6D encoding."""
    return np.asarray(rot, float)[:, :2].T.reshape(6)


def rot6d_to_matrix(r6):
    a, b = np.asarray(r6, float).reshape(2, 3)
    a = a / np.linalg.norm(a)
    b = b - (a @ b) * a
    b = b / np.linalg.norm(b)
    return np.stack([a, b, np.cross(a, b)], axis=1)


# -- canonical pose and forward kinematics -----------------------------------


def canonical_pose(kpts, root_pos, yaw):
    """Root-relative, yaw-removed keypoints (K, 3)."""
    rel = np.asarray(kpts, float) - np.asarray(root_pos, float)
    c, s = np.cos(yaw), np.sin(yaw)
    out = rel.copy()
    out[:, 0] = c * rel[:, 0] + s * rel[:, 1]
    out[:, 1] = -s * rel[:, 0] + c * rel[:, 1]
    return out


def fk_rotations(rels):
    """Pose the canonical skeleton from per-joint relative rotations (7,3,3)."""
    pts = np.zeros((K, 3))
    frames = np.zeros((K, 3, 3))
    frames[0] = np.eye(3)
    for k in range(1, K):
        pa = PARENTS[k]
        local = frames[pa] @ rels[k - 1]
        pts[k] = pts[pa] + local @ REST_OFFSETS[k]
        frames[k] = local
    return pts


def rotations_from_pose(canon, phi):
    """Per-joint relative rotations from canonical keypoints and twist angles.

    Walking the tree, each bone's observed direction is expressed in the
    parent frame accumulated so far (twists included), so forward kinematics
    with the result reproduces the input positions exactly for any phi.
    """
    frames = [np.eye(3)] * K
    rels = np.zeros((N_JOINTS, 3, 3))
    for k in range(1, K):
        pa = PARENTS[k]
        j = k - 1
        bone = canon[k] - canon[pa]
        n = np.linalg.norm(bone)
        v = frames[pa].T @ (bone / n) if n > 1e-9 else BONE_DIRS[j]
        rels[j] = swing_between(BONE_DIRS[j], v) @ axis_angle(BONE_DIRS[j], phi[j])
        frames[k] = frames[pa] @ rels[j]
    return rels


# -- dataset and network -----------------------------------------------------


def build_dataset(rng: RngStream, n: int, max_angle: float = 1.5):
    """Random 1-DoF poses with exact rotation labels.

    Inputs are canonical keypoints; labels are the twist angle and 6D encoding
    of each joint's true relative rotation.
    """
    X = np.zeros((n, K * 3))
    Phi = np.zeros((n, N_JOINTS))
    R6 = np.zeros((n, N_JOINTS, 6))
    for i in range(n):
        joints = rng.uniform(-max_angle, max_angle, (N_JOINTS,))
        s = AgentState.rest()
        s.pos = np.zeros(3)
        s.joints = joints
        kpts = keypoints_batch(BatchState.from_states([s]))[0]
        canon = canonical_pose(kpts, s.pos, 0.0)
        X[i] = canon.reshape(-1)
        for j in range(N_JOINTS):
            rot = axis_angle([0.0, 1.0, 0.0], joints[j])
            _, _, phi = twist_swing(rot, BONE_DIRS[j])
            Phi[i, j] = phi
            R6[i, j] = rot6d(rot)
    return X, Phi, R6


def save_dataset(path, X, Phi, R6):
    np.savez_compressed(path, X=X, Phi=Phi, R6=R6)


def load_dataset(path):
    with np.load(path) as z:
        return z["X"], z["Phi"], z["R6"]


OUT_DIM = N_JOINTS + N_JOINTS * 6


def init_twistnet(rng: RngStream, cfg_p2r) -> ParamSet:
    params = ParamSet()
    mlp_init(rng, [K * 3, cfg_p2r["hidden"], cfg_p2r["hidden"], OUT_DIM], params, "twist")
    return params


def twistnet_forward(params, x):
    out = mlp_forward(params, x, "twist", 3)
    return out


def train_twistnet(X, Phi, R6, cfg_p2r, seed: int) -> tuple[ParamSet, list[float]]:
    rng = RngStream(seed)
    params = init_twistnet(rng.spawn(0), cfg_p2r)
    state = AdamState(lr=cfg_p2r["learning_rate"])
    n = len(X)
    losses = []
    for _ in range(cfg_p2r["epochs"]):
        idx = rng.integers(0, n, (min(cfg_p2r["batch"], n),))
        xb = Tensor(X[idx])
        out = twistnet_forward(params, xb)
        phi_hat = out[:, :N_JOINTS]
        r6_hat = out[:, N_JOINTS:]
        d_phi = ad.sub(phi_hat, Phi[idx])
        d_r6 = ad.sub(r6_hat, R6[idx].reshape(len(idx), -1))
        loss = ad.add(ad.tmean(ad.mul(d_phi, d_phi)), ad.tmean(ad.mul(d_r6, d_r6)))
        backward(loss)
        adam_step_from_grads(params, state)
        params.zero_grads()
        losses.append(float(loss.data))
    return params, losses


def infer_rotations(params, canon):
    """Canonical keypoints -> per-joint relative rotations (7, 3, 3)."""
    p = raw(params) if isinstance(params, ParamSet) else params
    out = twistnet_forward(p, canon.reshape(1, -1))[0]
    phi = out[:N_JOINTS]
    return rotations_from_pose(canon, phi)
