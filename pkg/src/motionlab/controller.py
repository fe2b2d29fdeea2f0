"""Physics-tracking policy: Gaussian actor, value head, style discriminator.

The policy observes a proprioceptive block (root-local dynamics) plus a goal
block built by keypoint imitation against the next reference frame. Training
is PPO with a clipped surrogate, 32-step discounted returns, and an
adversarial style reward; `pretrain` bootstraps the actor with behavior
cloning of a feedback tracking oracle before the PPO phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import backward
from .config import GAIT_TOKENS, K, STYLE_TOKENS
from .nets import mlp_forward, mlp_init, raw
from .params import AdamState, ParamSet, adam_step_from_grads
from .rng import RngStream
from .world import (
    ACTION_DIM,
    N_JOINTS,
    AgentState,
    BatchState,
    clamp_actions,
    keypoints_batch,
    step_batch,
    wrap_angle,
)

# proprioceptive block: height, local velocity (3), yaw rate, joint angles,
# joint velocities, gait phase as sin/cos
SP_DIM = 1 + 3 + 1 + N_JOINTS + N_JOINTS + 2
# goal block: (P_ref - P, Pdot_ref - Pdot, P_ref) per keypoint, root-local
SG_DIM = 3 * K * 3
OBS_DIM = SP_DIM + SG_DIM


class PolicyFault(RuntimeError):
    pass


# -- observations ------------------------------------------------------------


def proprio_batch(state: BatchState) -> np.ndarray:
    """Root-local proprioceptive features, (N, SP_DIM)."""
    c, s = np.cos(state.yaw), np.sin(state.yaw)
    vx = c * state.vel[:, 0] + s * state.vel[:, 1]
    vy = -s * state.vel[:, 0] + c * state.vel[:, 1]
    return np.concatenate(
        [
            state.pos[:, 2:3],
            np.stack([vx, vy, state.vel[:, 2]], -1),
            state.yaw_rate[:, None],
            state.joints,
            state.joint_vel,
            np.sin(state.phase)[:, None],
            np.cos(state.phase)[:, None],
        ],
        axis=-1,
    )


def proprio(state: AgentState) -> np.ndarray:
    return proprio_batch(BatchState.from_states([state]))[0]


def _to_local(vectors: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Rotate world xy of (..., K, 3) vectors into the heading frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    out = vectors.copy()
    x, y = vectors[..., 0], vectors[..., 1]
    out[..., 0] = c[..., None] * x + s[..., None] * y
    out[..., 1] = -s[..., None] * x + c[..., None] * y
    return out


def goal_batch(ref_pos: np.ndarray, ref_vel: np.ndarray, state: BatchState,
               kpts: np.ndarray, kpt_vel: np.ndarray) -> np.ndarray:
    """Keypoint-imitation goal block, (N, SG_DIM).

    Concatenates (P_ref^{h+1} - P^h, Pdot_ref^{h+1} - Pdot^h, P_ref^{h+1}),
    every block expressed in the agent's root-local frame (xy relative to the
    root, rotated by -yaw; z absolute).
    """
    root = np.concatenate([state.pos[:, :2], np.zeros((state.n, 1))], -1)
    dp = _to_local(ref_pos - kpts, state.yaw)
    dv = _to_local(ref_vel - kpt_vel, state.yaw)
    pr = _to_local(ref_pos - root[:, None, :], state.yaw)
    n = state.n
    return np.concatenate([dp.reshape(n, -1), dv.reshape(n, -1), pr.reshape(n, -1)], -1)


def goal_state(ref_pos, ref_vel, current: AgentState, current_kpts=None,
               current_kpt_vel=None) -> np.ndarray:
    """Single-agent goal block; keypoints default to FK of the current state
    and keypoint velocities default to the root velocity."""
    batch = BatchState.from_states([current])
    kpts = keypoints_batch(batch) if current_kpts is None else np.asarray(current_kpts)[None]
    if current_kpt_vel is None:
        kpt_vel = np.tile(current.vel, (1, K, 1))
    else:
        kpt_vel = np.asarray(current_kpt_vel)[None]
    return goal_batch(np.asarray(ref_pos)[None], np.asarray(ref_vel)[None], batch,
                      kpts, kpt_vel)[0]


def observe_batch(state: BatchState, kpts, kpt_vel, ref_pos, ref_vel) -> np.ndarray:
    return np.concatenate(
        [proprio_batch(state), goal_batch(ref_pos, ref_vel, state, kpts, kpt_vel)], -1
    )


# -- networks ----------------------------------------------------------------


def init_policy_nets(rng: RngStream, cfg_ctrl: dict) -> ParamSet:
    """Actor mean, value head, and AMP discriminator in one parameter set."""
    h = cfg_ctrl["hidden"]
    params = ParamSet()
    mlp_init(rng.spawn(0), [OBS_DIM, h, h, ACTION_DIM], params, "pi", out_scale=0.01)
    mlp_init(rng.spawn(1), [OBS_DIM, h, h, 1], params, "v")
    mlp_init(rng.spawn(2), [cfg_ctrl["amp_frames"] * SP_DIM, h, h, 1], params, "d")
    return params


def policy_mean(p, obs):
    return mlp_forward(p, obs, "pi", 3)


def value(p, obs):
    return mlp_forward(p, obs, "v", 3)


def disc_score(p, segments):
    return mlp_forward(p, segments, "d", 3)


def log_prob(mu: np.ndarray, action: np.ndarray, sigma: float):
    """Exact diagonal-Gaussian log density, summed over action channels."""
    d = ad.sub(action, mu) if isinstance(mu, ad.Tensor) else action - mu
    quad = ad.tsum(ad.mul(d, d), axis=-1) if isinstance(mu, ad.Tensor) else np.sum(d * d, -1)
    const = ACTION_DIM * np.log(sigma * np.sqrt(2.0 * np.pi))
    if isinstance(mu, ad.Tensor):
        return ad.sub(ad.mul(quad, -0.5 / sigma**2), const)
    return -0.5 * quad / sigma**2 - const


def act(p, obs: np.ndarray, rng: RngStream, sigma: float, deterministic: bool = False):
    """Sample an action (or take the mean); returns (action, log-prob)."""
    mu = policy_mean(p, obs)
    if not np.isfinite(mu).all():
        raise PolicyFault("non-finite policy mean")
    if deterministic:
        return mu.copy(), (log_prob(mu, mu, sigma) if sigma > 0.0 else None)
    a = mu + sigma * rng.normal(mu.shape)
    return a, log_prob(mu, a, sigma)


# -- rewards -----------------------------------------------------------------


def amp_reward(score):
    """Style reward from the discriminator score, clipped into [0, 1]."""
    return np.maximum(0.0, 1.0 - 0.25 * (score - 1.0) ** 2)


def reward_components(kpts_next, ref_pos, action, prev_action, score, cfg_ctrl):
    """Imitation / style / energy components and their weighted combination."""
    err2 = np.mean(np.sum((np.asarray(kpts_next) - np.asarray(ref_pos)) ** 2, -1), -1)
    r_imit = np.exp(-cfg_ctrl["imitation_k"] * err2)
    r_amp = amp_reward(np.asarray(score))
    rate = np.asarray(action) - np.asarray(prev_action)
    r_energy = -cfg_ctrl["energy_weight"] * np.sum(rate * rate, -1)
    total = 0.5 * r_imit + 0.5 * r_amp + r_energy
    return total, {"imitation": r_imit, "style": r_amp, "energy": r_energy}


def stand_segment(cfg_world: dict, cfg_ctrl: dict) -> np.ndarray:
    """The standing anchor segment: one rest-pose frame replicated."""
    frame = proprio(AgentState.rest(cfg_world["stand_height"]))
    return np.tile(frame, cfg_ctrl["amp_frames"])


# -- rollout buffer and PPO --------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)  # (N, OBS) per step
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    amp_fake: list = field(default_factory=list)  # simulated segments
    amp_real: list = field(default_factory=list)  # reference/anchor segments

    def __len__(self):
        return len(self.obs)

    def add(self, obs, actions, log_probs, rewards, segments):
        self.obs.append(obs)
        self.actions.append(actions)
        self.log_probs.append(log_probs)
        self.rewards.append(rewards)
        self.amp_fake.append(segments)

    def stacked(self):
        return (np.stack(self.obs), np.stack(self.actions), np.stack(self.log_probs),
                np.stack(self.rewards))


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Plain discounted cumulative sums over the horizon (no bootstrap)."""
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def ppo_update(params: ParamSet, buffer: RolloutBuffer, adam: AdamState, cfg_ctrl: dict,
               rng: RngStream, lambda_extra=None) -> dict:
    """One PPO update over the aggregated buffer, minibatched internally.

    `lambda_extra(params, obs_mb, idx)` may return an additional loss term
    added to the PPO objective (used by the adaptation losses); `idx` indexes
    the minibatch rows into the flattened buffer. Returns the loss components;
    NaN probability ratios skip the minibatch and count as faults.
    """
    obs, actions, logp_old, rewards = buffer.stacked()
    T, N = rewards.shape
    flat_obs = obs.reshape(T * N, -1)
    flat_act = actions.reshape(T * N, -1)
    flat_logp = logp_old.reshape(T * N)
    returns = discounted_returns(rewards, cfg_ctrl["gamma"]).reshape(T * N)
    p_raw = raw(params)
    adv = returns - value(p_raw, flat_obs)[:, 0]

    fake = np.concatenate(buffer.amp_fake) if buffer.amp_fake else np.zeros((0, 1))
    real = np.concatenate(buffer.amp_real) if buffer.amp_real else np.zeros((0, 1))

    sigma = cfg_ctrl["sigma"]
    eps_clip = cfg_ctrl["clip_eps"]
    order = rng.permutation(T * N)
    mb_size = min(cfg_ctrl["minibatch"], T * N)
    totals = {"policy": 0.0, "value": 0.0, "disc": 0.0, "extra": 0.0, "faults": 0}
    n_mb = 0
    for lo in range(0, T * N, mb_size):
        idx = order[lo:lo + mb_size]
        a = adv[idx]
        a = (a - a.mean()) / (a.std() + 1e-8)

        mu = policy_mean(params, flat_obs[idx])
        logp = log_prob(mu, flat_act[idx], sigma)
        ratio = ad.exp(ad.sub(logp, flat_logp[idx]))
        if not np.isfinite(ratio.data).all():
            totals["faults"] += 1
            params.zero_grads()
            continue
        clipped = ad.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
        surrogate = ad.minimum(ad.mul(ratio, a), ad.mul(clipped, a))
        loss_pi = ad.mul(ad.tmean(surrogate), -1.0)

        v = value(params, flat_obs[idx])[:, 0]
        dv = ad.sub(v, returns[idx])
        loss_v = ad.tmean(ad.mul(dv, dv))

        loss = ad.add(loss_pi, loss_v)
        if len(fake) and len(real):
            seg_idx = rng.integers(0, len(fake), (min(mb_size, len(fake)),))
            real_idx = rng.integers(0, len(real), (len(seg_idx),))
            s_fake = disc_score(params, fake[seg_idx])[:, 0]
            s_real = disc_score(params, real[real_idx])[:, 0]
            # binary cross-entropy: real label 1, simulated label 0
            # (-log sigmoid(s) = softplus(-s), -log(1 - sigmoid(s)) = softplus(s))
            bce = ad.add(
                ad.tmean(ad.softplus(ad.mul(s_real, -1.0))),
                ad.tmean(ad.softplus(s_fake)),
            )
            loss = ad.add(loss, bce)
            totals["disc"] += float(bce.data)
        if lambda_extra is not None:
            extra = lambda_extra(params, flat_obs[idx], idx)
            if extra is not None:
                loss = ad.add(loss, extra)
                totals["extra"] += float(np.asarray(extra.data if isinstance(extra, ad.Tensor) else extra))

        backward(loss)
        adam_step_from_grads(params, adam)
        params.zero_grads()
        totals["policy"] += float(loss_pi.data)
        totals["value"] += float(loss_v.data)
        n_mb += 1
    if n_mb:
        for key in ("policy", "value", "disc", "extra"):
            totals[key] /= n_mb
    return totals


# -- reference clips and the tracking oracle ---------------------------------


def reference_clip(rng: RngStream, style: int, frames: int, cfg) -> dict:
    """Scripted reference motion for tracking: positions, yaw, joints,
    keypoints, and finite-difference velocities."""
    from .corpus import _gait_joints, _pose_frames, _script_walk

    dt = cfg["world"]["dt"]
    base = cfg["corpus"]["speed"][STYLE_TOKENS[style]]
    xy, yaw, speed, phase = _script_walk(rng, frames, base, cfg["corpus"]["curvature_noise"], dt)
    joints = _gait_joints(phase, speed)
    pos, kpts = _pose_frames(xy, yaw, joints)
    kpt_vel = np.zeros_like(kpts)
    kpt_vel[1:] = (kpts[1:] - kpts[:-1]) / dt
    kpt_vel[0] = kpt_vel[1]
    root_vel = np.zeros_like(pos)
    root_vel[1:] = (pos[1:] - pos[:-1]) / dt
    root_vel[0] = root_vel[1]
    joint_vel = np.zeros_like(joints)
    joint_vel[1:] = (joints[1:] - joints[:-1]) / dt
    joint_vel[0] = joint_vel[1]
    return {
        "pos": pos, "yaw": yaw, "joints": joints, "joint_vel": joint_vel,
        "phase": np.mod(phase, 2.0 * np.pi), "kpts": kpts, "kpt_vel": kpt_vel,
        "root_vel": root_vel, "dt": dt,
    }


def clip_start_state(clip: dict, h: int = 0) -> AgentState:
    return AgentState(
        pos=clip["pos"][h].copy(),
        yaw=float(clip["yaw"][h]),
        vel=clip["root_vel"][h].copy(),
        yaw_rate=0.0,
        joints=clip["joints"][h].copy(),
        joint_vel=clip["joint_vel"][h].copy(),
        phase=float(clip["phase"][h]),
    )


def oracle_actions(state: BatchState, ref_pos, ref_yaw, ref_joints, dt, cfg_world,
                   joint_boost: float = 1.5) -> np.ndarray:
    """Feedback tracking oracle: servo targets that close the gap to the next
    reference frame in one step (clamped by the action limits)."""
    n = state.n
    vel_world = (np.asarray(ref_pos)[:, :2] - state.pos[:, :2]) / dt
    c, s = np.cos(state.yaw), np.sin(state.yaw)
    vel_local = np.stack(
        [c * vel_world[:, 0] + s * vel_world[:, 1], -s * vel_world[:, 0] + c * vel_world[:, 1]], -1
    )
    yaw_rate = wrap_angle(np.asarray(ref_yaw) - state.yaw) / dt
    target_j = np.asarray(ref_joints) + joint_boost * (np.asarray(ref_joints) - state.joints)
    a = np.concatenate([vel_local, yaw_rate[:, None], target_j], -1)
    return clamp_actions(a, cfg_world)


def track_clip(p_raw, clip: dict, cfg, sigma: float = 0.0, rng: RngStream | None = None):
    """Roll the policy along a reference clip; returns mean keypoint error."""
    cfg_world = cfg["world"]
    dt = clip["dt"]
    frames = len(clip["yaw"])
    state = BatchState.from_states([clip_start_state(clip)])
    errors = []
    prev_kpts = keypoints_batch(state)
    for h in range(frames - 1):
        kpts = keypoints_batch(state)
        kpt_vel = (kpts - prev_kpts) / dt if h else np.tile(state.vel[:, None, :], (1, K, 1))
        obs = observe_batch(state, kpts, kpt_vel, clip["kpts"][h + 1][None],
                            clip["kpt_vel"][h + 1][None])
        if sigma > 0.0 and rng is not None:
            a, _ = act(p_raw, obs, rng, sigma)
        else:
            a, _ = act(p_raw, obs, rng, sigma, deterministic=True)
        prev_kpts = kpts
        state, _ = step_batch(state, a, dt, cfg_world)
        errors.append(
            np.mean(np.linalg.norm(keypoints_batch(state)[0] - clip["kpts"][h + 1], axis=-1))
        )
    return float(np.mean(errors))


# -- pretraining -------------------------------------------------------------


def _bc_phase(params: ParamSet, cfg, rng: RngStream, progress=None):
    """Behavior cloning of the tracking oracle on perturbed reference states."""
    cfg_ctrl = cfg["controller"]
    cfg_world = cfg["world"]
    dt = cfg_world["dt"]
    horizon = cfg_ctrl["horizon"]
    adam = AdamState(lr=cfg_ctrl["pretrain_learning_rate"])
    n_clips = 64
    clips = [
        reference_clip(rng.spawn(i), i % len(GAIT_TOKENS), horizon + 2, cfg)
        for i in range(n_clips)
    ]
    losses = []
    for step_i in range(cfg_ctrl["pretrain_bc_steps"]):
        batch = 256
        ci = rng.integers(0, n_clips, (batch,))
        hi = rng.integers(0, horizon, (batch,))
        states = []
        ref_pos, ref_vel, ref_yaw, ref_joints = [], [], [], []
        for c_idx, h in zip(ci, hi):
            clip = clips[c_idx]
            st = clip_start_state(clip, int(h))
            # perturb so the cloned policy sees off-reference states
            st.pos[:2] += 0.15 * rng.normal((2,))
            st.pos[2] += 0.03 * float(rng.normal(()))
            st.yaw = float(wrap_angle(st.yaw + 0.2 * float(rng.normal(()))))
            st.joints = st.joints + 0.1 * rng.normal((N_JOINTS,))
            st.vel = st.vel + 0.2 * rng.normal((3,))
            states.append(st)
            ref_pos.append(clip["kpts"][h + 1])
            ref_vel.append(clip["kpt_vel"][h + 1])
            ref_yaw.append(clip["yaw"][h + 1])
            ref_joints.append(clip["joints"][h + 1])
        bs = BatchState.from_states(states)
        kpts = keypoints_batch(bs)
        kpt_vel = np.tile(bs.vel[:, None, :], (1, K, 1))
        obs = observe_batch(bs, kpts, kpt_vel, np.stack(ref_pos), np.stack(ref_vel))
        target = oracle_actions(bs, np.stack([p[0] for p in ref_pos]), np.array(ref_yaw),
                                np.stack(ref_joints), dt, cfg_world)
        mu = policy_mean(params, obs)
        d = ad.sub(mu, target)
        loss = ad.tmean(ad.mul(d, d))
        backward(loss)
        adam_step_from_grads(params, adam)
        params.zero_grads()
        losses.append(float(loss.data))
        if progress and (step_i + 1) % 100 == 0:
            progress("bc", step_i + 1, losses[-1])
    return losses


def rollout_tracking(params_or_raw, clips, states: BatchState, start_h, cfg,
                     rng: RngStream, buffer: RolloutBuffer | None = None,
                     segments=None):
    """Collect one horizon of tracking transitions across environments.

    Returns (final BatchState, mean reward). When a buffer is given, the
    transitions and AMP segments are recorded for PPO.
    """
    cfg_ctrl = cfg["controller"]
    cfg_world = cfg["world"]
    dt = cfg_world["dt"]
    sigma = cfg_ctrl["sigma"]
    horizon = cfg_ctrl["horizon"]
    n = states.n
    p_raw = raw(params_or_raw) if isinstance(params_or_raw, ParamSet) else params_or_raw
    if segments is None:
        segments = np.tile(proprio_batch(states)[:, None, :], (1, cfg_ctrl["amp_frames"], 1))
    prev_action = np.zeros((n, ACTION_DIM))
    prev_kpts = keypoints_batch(states)
    mean_rewards = []
    for h in range(horizon):
        kpts = keypoints_batch(states)
        kpt_vel = (kpts - prev_kpts) / dt
        ref_pos = np.stack([c["kpts"][start_h + h + 1] for c in clips])
        ref_vel = np.stack([c["kpt_vel"][start_h + h + 1] for c in clips])
        obs = observe_batch(states, kpts, kpt_vel, ref_pos, ref_vel)
        actions, logp = act(p_raw, obs, rng, sigma)
        prev_kpts = kpts
        states, _ = step_batch(states, actions, dt, cfg_world)
        segments = np.concatenate([segments[:, 1:], proprio_batch(states)[:, None, :]], axis=1)
        seg_flat = segments.reshape(n, -1)
        scores = disc_score(p_raw, seg_flat)[:, 0]
        r, _ = reward_components(keypoints_batch(states), ref_pos, actions, prev_action,
                                 scores, cfg_ctrl)
        prev_action = actions
        mean_rewards.append(r.mean())
        if buffer is not None:
            buffer.add(obs, actions, logp, r, seg_flat)
    return states, float(np.mean(mean_rewards)), segments


def pretrain(cfg, seed: int, progress=None):
    """BC warm start plus PPO fine-tuning on scripted gait references.

    Returns (params, metrics dict)."""
    cfg_ctrl = cfg["controller"]
    rng = RngStream(seed)
    params = init_policy_nets(rng.spawn(0), cfg_ctrl)
    bc_losses = _bc_phase(params, cfg, rng.spawn(1), progress)

    horizon = cfg_ctrl["horizon"]
    adam = AdamState(lr=cfg_ctrl["pretrain_learning_rate"] * 0.1)
    n_envs = 16
    ppo_rewards = []
    roll_rng = rng.spawn(2)
    best = None
    for epoch in range(cfg_ctrl["pretrain_ppo_epochs"]):
        clips = [
            reference_clip(roll_rng.spawn(epoch * n_envs + i), i % len(GAIT_TOKENS),
                           horizon + 2, cfg)
            for i in range(n_envs)
        ]
        states = BatchState.from_states([clip_start_state(c) for c in clips])
        buffer = RolloutBuffer()
        _, mean_r, _ = rollout_tracking(params, clips, states, 0, cfg, roll_rng, buffer)
        # reference segments are in-corpus motion (label 1)
        real = []
        for c in clips:
            bs = BatchState(
                pos=c["pos"][: cfg_ctrl["amp_frames"]],
                yaw=c["yaw"][: cfg_ctrl["amp_frames"]],
                vel=c["root_vel"][: cfg_ctrl["amp_frames"]],
                yaw_rate=np.zeros(cfg_ctrl["amp_frames"]),
                joints=c["joints"][: cfg_ctrl["amp_frames"]],
                joint_vel=c["joint_vel"][: cfg_ctrl["amp_frames"]],
                phase=c["phase"][: cfg_ctrl["amp_frames"]],
            )
            real.append(proprio_batch(bs).reshape(-1))
        buffer.amp_real.append(np.stack(real))
        losses = ppo_update(params, buffer, adam, cfg_ctrl, roll_rng)
        ppo_rewards.append(mean_r)
        if best is None or mean_r > best[0]:
            best = (mean_r, params.copy())
        if progress and (epoch + 1) % 10 == 0:
            progress("ppo", epoch + 1, mean_r)
        if epoch > 10 and mean_r < 0.05:
            raise PolicyFault("pretraining reward collapsed")
    # keep the best-reward snapshot to guard against late PPO noise
    if best is not None and ppo_rewards and best[0] > ppo_rewards[-1]:
        params.load_values(best[1])
    return params, {"bc_losses": bc_losses, "ppo_rewards": ppo_rewards}
