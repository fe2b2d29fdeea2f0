"""Test-time adaptation of the tracking policy.

Each epoch rolls the policy for one horizon across an environment pool,
replanning with the guided diffusion planner on a fixed period, then takes a
single PPO update augmented with two regularizers: a catastrophic-forgetting
consistency loss against slow EMA target networks, and a robustness loss that
penalizes policy drift when states are nudged toward their planned
counterparts. Planned policy states are built from the kinematic plan via the
twist-swing rotation recovery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import controller as ctrl
from .config import K
from .guidance import GuidanceConfig, GuidanceTerm, sample_guided
from .motionrep import Anchor, Condition, Standardizer, decode, encode
from .nav import WalkableMap, next_intermediate_target
from .nets import raw
from .p2r import canonical_pose, rotations_from_pose
from .params import AdamState, ParamSet, ema_update
from .rng import RngStream
from .world import (
    AgentState,
    BatchState,
    N_JOINTS,
    ObstacleField,
    SimulationFault,
    keypoints_batch,
    step_batch,
    wrap_angle,
)

log = logging.getLogger(__name__)


@dataclass
class NetworkTriple:
    """Online and EMA-target parameter sets for actor, value head, and
    discriminator."""

    online: ParamSet
    target: ParamSet
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("EMA alpha must lie in [0, 1]")
        if self.online.names() != self.target.names():
            raise ValueError("online and target parameter names must match")

    @classmethod
    def from_pretrained(cls, params: ParamSet, alpha: float) -> "NetworkTriple":
        return cls(online=params.copy(), target=params.copy(), alpha=alpha)

    def ema_step(self):
        ema_update(self.target, self.online, self.alpha)


@dataclass
class TtaConfig:
    lambda_cf: float = 1.0
    lambda_robust: float = 1e-4
    alpha: float = 0.999
    epochs: int = 200
    horizon: int = 32
    replan_period: int = 60
    beta_ramp_fraction: float = 0.5
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.lambda_cf < 0 or self.lambda_robust < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_config(cls, cfg) -> "TtaConfig":
        t = cfg["tta"]
        return cls(
            lambda_cf=t["lambda_cf"],
            lambda_robust=t["lambda_robust"],
            alpha=t["alpha"],
            epochs=t["epochs"],
            horizon=cfg["controller"]["horizon"],
            replan_period=cfg["planner"]["window"],
            beta_ramp_fraction=t["beta_ramp_fraction"],
            learning_rate=t["adapt_learning_rate"],
        )


def beta_at(epoch: int, tcfg: TtaConfig) -> float:
    """Perturbation strength: linear 0 -> 1 over the first ramp fraction."""
    ramp = max(1, int(tcfg.epochs * tcfg.beta_ramp_fraction))
    return float(np.clip(epoch / ramp, 0.0, 1.0))


# -- adaptation losses -------------------------------------------------------


def loss_cf(triple: NetworkTriple, obs: np.ndarray, segments: np.ndarray):
    """Consistency of value, policy mean, and discriminator against the EMA
    targets; the target branches are plain numpy, so they get no gradient."""
    t_raw = raw(triple.target)
    v_on = ctrl.value(triple.online, obs)[:, 0]
    v_tg = ctrl.value(t_raw, obs)[:, 0]
    dv = ad.sub(v_on, v_tg)
    total = ad.tmean(ad.mul(dv, dv))

    mu_on = ctrl.policy_mean(triple.online, obs)
    mu_tg = ctrl.policy_mean(t_raw, obs)
    dm = ad.sub(mu_on, mu_tg)
    total = ad.add(total, ad.tmean(ad.tsum(ad.mul(dm, dm), axis=-1)))

    if len(segments):
        d_on = ctrl.disc_score(triple.online, segments)[:, 0]
        d_tg = ctrl.disc_score(t_raw, segments)[:, 0]
        dd = ad.sub(d_on, d_tg)
        total = ad.add(total, ad.tmean(ad.mul(dd, dd)))
    return total


def loss_robust(params, obs: np.ndarray, obs_plan: np.ndarray, beta: float, sigma: float):
    """KL( N(mu(s), sigma^2) || N(mu(s + beta (s_plan - s)), sigma^2) ),
    which for a shared fixed sigma is ||mu(s) - mu(s')||^2 / (2 sigma^2)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    perturbed = obs + beta * (obs_plan - obs)
    mu = ctrl.policy_mean(params, obs)
    mu_p = ctrl.policy_mean(params, perturbed)
    d = ad.sub(mu, mu_p)
    return ad.mul(ad.tmean(ad.tsum(ad.mul(d, d), axis=-1)), 0.5 / sigma**2)


# -- planned policy states ---------------------------------------------------


def _joint_angles_from_rotations(rels: np.ndarray) -> np.ndarray:
    """Per-joint angle about the lateral axis from relative rotations."""
    return np.arctan2(rels[:, 0, 2], rels[:, 0, 0])


def plan_joint_angles(plan: dict, h: int, p2r=None):
    """Joint angles of plan frame h via rotation recovery; (angles, fault)."""
    canon = canonical_pose(plan["kpts"][h], plan["pos"][h], plan["yaw"][h])
    try:
        if p2r is not None:
            rels = p2r(canon)
        else:
            rels = rotations_from_pose(canon, np.zeros(N_JOINTS))
        if not np.isfinite(rels).all():
            raise ValueError("non-finite rotations")
    except Exception:
        return np.zeros(N_JOINTS), True
    return _joint_angles_from_rotations(rels), False


def build_planned_state(plan: dict, h: int, executed: AgentState, p2r=None,
                        executed_kpts=None, executed_kpt_vel=None):
    """Planned policy state for plan frame h; returns (obs vector, fault flag).

    The proprioceptive block describes the plan's own frame-h dynamics
    (velocities by finite differences, joint angles via rotation recovery);
    the goal block compares plan frame h+1 against the executed state, in the
    executed root-local frame. Needs plan frames h-1 .. h+1.
    """
    if h < 1 or h + 1 >= len(plan["yaw"]):
        raise ValueError("plan must cover frames h-1 .. h+1")
    dt = plan["dt"]
    fault = False

    angles, f0 = plan_joint_angles(plan, h, p2r)
    angles_prev, f1 = plan_joint_angles(plan, h - 1, p2r)
    fault = f0 or f1

    vel_world = (plan["pos"][h] - plan["pos"][h - 1]) / dt
    yaw = plan["yaw"][h]
    c, s = np.cos(yaw), np.sin(yaw)
    vel_local = np.array(
        [c * vel_world[0] + s * vel_world[1], -s * vel_world[0] + c * vel_world[1], vel_world[2]]
    )
    yaw_rate = wrap_angle(plan["yaw"][h] - plan["yaw"][h - 1]) / dt
    sp = np.concatenate(
        [
            [plan["pos"][h, 2]],
            vel_local,
            [yaw_rate],
            angles,
            wrap_angle(angles - angles_prev) / dt,
            [np.sin(executed.phase), np.cos(executed.phase)],
        ]
    )

    sg = ctrl.goal_state(plan["kpts"][h + 1], plan["kpt_vel"][h + 1], executed,
                         current_kpts=executed_kpts, current_kpt_vel=executed_kpt_vel)
    return np.concatenate([sp, sg]), fault


# -- environment pool --------------------------------------------------------


@dataclass
class TtaTask:
    """One adaptation scenario: scene, conditioning, and guidance recipe."""

    style: int
    target_xy: np.ndarray  # world goal
    field: ObstacleField
    walkable: WalkableMap | None = None
    target_joint: int = 0
    start_xy: np.ndarray = field(default_factory=lambda: np.zeros(2))
    obstacle_weight: float = 0.0  # Obst guidance weight (0 = term absent)
    target_weight: float = 0.0  # WeightedPos guidance weight toward the goal
    intermediate_radius: float = 1.2

    def guidance_terms(self, anchor_target_world) -> list[GuidanceTerm]:
        terms = []
        if self.obstacle_weight > 0 and self.walkable is not None:
            terms.append(GuidanceTerm("Obst", self.obstacle_weight, walkable=self.walkable))
        if self.target_weight > 0:
            terms.append(
                GuidanceTerm("WeightedPos", self.target_weight,
                             target=np.asarray(anchor_target_world, float),
                             joint=self.target_joint)
            )
        return terms


class PlannerHandle:
    """Frozen planner bundle used for replanning during adaptation."""

    def __init__(self, params, sched, stats: Standardizer, cfg_planner, gcfg: GuidanceConfig):
        self.raw = raw(params) if isinstance(params, ParamSet) else params
        self.params = params
        self.sched = sched
        self.stats = stats
        self.cfg = cfg_planner
        self.gcfg = gcfg


def _to_anchor_frame(xy_world, anchor: Anchor):
    d = np.asarray(xy_world, float) - anchor.xy
    c, s = np.cos(anchor.yaw), np.sin(anchor.yaw)
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])


class TtaPool:
    """Environment pool whose per-env plan cursors persist across epochs."""

    def __init__(self, n_envs: int, task: TtaTask, cfg, seed: int):
        self.task = task
        self.cfg = cfg
        self.n = n_envs
        self.rng = RngStream(seed)
        self.context_len = cfg["planner"]["context"]
        self.states = BatchState.from_states([self._initial_state(i) for i in range(n_envs)])
        self.h_global = np.zeros(n_envs, dtype=int)
        self.plans: list[dict | None] = [None] * n_envs
        self.plan_start = np.zeros(n_envs, dtype=int)
        self.history = [self._seed_history(self.states.get(i)) for i in range(n_envs)]
        self.failures = 0
        self.guidance_warnings = 0
        self.p2r_faults = 0

    def _initial_state(self, i: int) -> AgentState:
        jitter = 0.1 * self.rng.normal((2,))
        return AgentState.rest(
            self.cfg["world"]["stand_height"],
            pos_xy=self.task.start_xy + jitter,
            yaw=float(self.rng.uniform(-np.pi, np.pi)),
        )

    def _seed_history(self, state: AgentState):
        kpts = keypoints_batch(BatchState.from_states([state]))[0]
        frame = (state.pos.copy(), state.yaw, kpts)
        return [frame] * (self.context_len + 1)

    def _push_history(self, i: int):
        state = self.states.get(i)
        kpts = keypoints_batch(BatchState.from_states([state]))[0]
        self.history[i].append((state.pos.copy(), state.yaw, kpts))
        del self.history[i][0]

    def _context_features(self, i: int, stats: Standardizer):
        hist = self.history[i]
        anchor0 = Anchor(hist[0][0][:2].copy(), float(hist[0][1]))
        pos = np.stack([f[0] for f in hist[1:]])
        yaw = np.array([f[1] for f in hist[1:]])
        kpts = np.stack([f[2] for f in hist[1:]])
        return stats.apply(encode(pos, yaw, kpts, anchor0))

    def replan(self, i: int, planner: PlannerHandle, rng: RngStream):
        state = self.states.get(i)
        anchor = Anchor(state.pos[:2].copy(), float(state.yaw))
        context = self._context_features(i, planner.stats)[None]

        target_world = next_intermediate_target(
            state.pos[:2], self.task.target_xy, radius=self.task.intermediate_radius
        )
        cond = Condition(
            style=self.task.style,
            target=_to_anchor_frame(target_world, anchor),
            target_joint=self.task.target_joint,
        )
        terms = self.task.guidance_terms(target_world)
        x0, warned = sample_guided(
            planner.raw, planner.sched, context, cond, terms, planner.gcfg, rng,
            planner.cfg, anchor, standardizer=planner.stats,
        )
        self.guidance_warnings += warned
        pos, yaw, kpts = decode(planner.stats.invert(x0), anchor)
        pos, yaw, kpts = np.asarray(pos), np.asarray(yaw), np.asarray(kpts)
        dt = self.cfg["world"]["dt"]
        # prepend the executed frame so plan index f has neighbors f-1, f+1
        cur_kpts = self.history[i][-1][2]
        pos = np.vstack([state.pos[None], pos])
        yaw = np.concatenate([[state.yaw], yaw])
        kpts = np.concatenate([cur_kpts[None], kpts])
        kpt_vel = np.zeros_like(kpts)
        kpt_vel[1:] = (kpts[1:] - kpts[:-1]) / dt
        kpt_vel[0] = kpt_vel[1]
        self.plans[i] = {"pos": pos, "yaw": yaw, "kpts": kpts, "kpt_vel": kpt_vel, "dt": dt}
        self.plan_start[i] = self.h_global[i]

    def plan_cursor(self, i: int) -> int:
        return int(self.h_global[i] - self.plan_start[i]) + 1

    def reset_env(self, i: int):
        state = self._initial_state(i)
        self.states.set(i, state)
        self.h_global[i] = 0
        self.plans[i] = None
        self.history[i] = self._seed_history(state)
        self.failures += 1


def tta_epoch(pool: TtaPool, planner: PlannerHandle, triple: NetworkTriple,
              adam: AdamState, tcfg: TtaConfig, cfg, epoch: int, rng: RngStream,
              p2r=None) -> dict:
    """One adaptation epoch over the pool; returns rollout and loss metrics.

    Fresh buffers each epoch; replanning whenever an environment's global
    frame counter crosses the replan period; a single augmented PPO update,
    then one EMA step of the target networks.
    """
    cfg_ctrl = cfg["controller"]
    cfg_world = cfg["world"]
    dt = cfg_world["dt"]
    sigma = cfg_ctrl["sigma"]
    n = pool.n
    p_online = raw(triple.online)
    buffer = ctrl.RolloutBuffer()
    obs_plan_rows = []
    track_errors = []

    prev_action = np.zeros((n, ctrl.ACTION_DIM))
    segments = np.tile(ctrl.proprio_batch(pool.states)[:, None, :],
                       (1, cfg_ctrl["amp_frames"], 1))
    stand = ctrl.stand_segment(cfg_world, cfg_ctrl)

    for _ in range(tcfg.horizon):
        for i in range(n):
            cursor_last = pool.plans[i] is not None and pool.plan_cursor(i) + 1 >= len(pool.plans[i]["yaw"]) - 1
            if pool.plans[i] is None or pool.h_global[i] % tcfg.replan_period == 0 or cursor_last:
                pool.replan(i, planner, rng)

        kpts = keypoints_batch(pool.states)
        kpt_vel = np.tile(pool.states.vel[:, None, :], (1, K, 1))
        cursors = [pool.plan_cursor(i) for i in range(n)]
        ref_pos = np.stack([pool.plans[i]["kpts"][cursors[i]] for i in range(n)])
        ref_vel = np.stack([pool.plans[i]["kpt_vel"][cursors[i]] for i in range(n)])
        obs = ctrl.observe_batch(pool.states, kpts, kpt_vel, ref_pos, ref_vel)

        plan_rows = np.zeros_like(obs)
        for i in range(n):
            row, fault = build_planned_state(
                pool.plans[i], cursors[i], pool.states.get(i), p2r,
                executed_kpts=kpts[i], executed_kpt_vel=kpt_vel[i],
            )
            pool.p2r_faults += int(fault)
            plan_rows[i] = row
        obs_plan_rows.append(plan_rows)

        actions, logp = ctrl.act(p_online, obs, rng, sigma)
        try:
            next_states, _ = step_batch(pool.states, actions, dt, cfg_world, pool.task.field)
        except SimulationFault:
            # salvage per-env: re-step one by one, resetting the bad ones
            for i in range(n):
                try:
                    single = BatchState.from_states([pool.states.get(i)])
                    stepped, _ = step_batch(single, actions[i][None], dt, cfg_world,
                                            pool.task.field)
                    pool.states.set(i, stepped.get(0))
                except SimulationFault:
                    pool.reset_env(i)
            next_states = pool.states
        pool.states = next_states
        pool.h_global += 1
        for i in range(n):
            pool._push_history(i)

        segments = np.concatenate(
            [segments[:, 1:], ctrl.proprio_batch(pool.states)[:, None, :]], axis=1
        )
        seg_flat = segments.reshape(n, -1)
        scores = ctrl.disc_score(p_online, seg_flat)[:, 0]
        r, _ = ctrl.reward_components(keypoints_batch(pool.states), ref_pos, actions,
                                      prev_action, scores, cfg_ctrl)
        prev_action = actions
        err = np.mean(np.linalg.norm(keypoints_batch(pool.states) - ref_pos, axis=-1), axis=-1)
        track_errors.append(err)
        buffer.add(obs, actions, logp, r, seg_flat)

        # tracking divergence counts as execution failure
        for i in np.nonzero(err > cfg_ctrl["fail_error"])[0]:
            pool.reset_env(int(i))

    buffer.amp_real.append(np.tile(stand, (n, 1)))
    obs_plan_flat = np.concatenate(obs_plan_rows)
    fake_flat = np.concatenate(buffer.amp_fake)
    beta = beta_at(epoch, tcfg)

    extras = {"cf": 0.0, "robust": 0.0, "calls": 0}

    def lambda_extra(params, obs_mb, idx):
        if tcfg.lambda_cf == 0.0 and tcfg.lambda_robust == 0.0:
            return None
        total = 0.0
        if tcfg.lambda_cf > 0.0:
            seg_mb = fake_flat[idx % len(fake_flat)]
            cf = loss_cf(triple, obs_mb, seg_mb)
            extras["cf"] += float(cf.data)
            total = ad.add(total, ad.mul(cf, tcfg.lambda_cf))
        if tcfg.lambda_robust > 0.0:
            rb = loss_robust(params, obs_mb, obs_plan_flat[idx], beta, sigma)
            extras["robust"] += float(rb.data)
            total = ad.add(total, ad.mul(rb, tcfg.lambda_robust))
        extras["calls"] += 1
        return total

    losses = ctrl.ppo_update(
        triple.online, buffer, adam, cfg_ctrl, rng,
        lambda_extra=None if (tcfg.lambda_cf == 0.0 and tcfg.lambda_robust == 0.0)
        else lambda_extra,
    )
    triple.ema_step()

    err_arr = np.stack(track_errors)
    calls = max(extras["calls"], 1)
    return {
        "policy_loss": losses["policy"],
        "value_loss": losses["value"],
        "cf_loss": extras["cf"] / calls,
        "robust_loss": extras["robust"] / calls,
        "beta": beta,
        "mean_tracking_error": float(err_arr.mean()),
        "err_p50": float(np.quantile(err_arr, 0.5)),
        "err_p90": float(np.quantile(err_arr, 0.9)),
        "err_p99": float(np.quantile(err_arr, 0.99)),
        "exec_rate": float(
            np.mean(err_arr < cfg_ctrl.get("exec_error", cfg_ctrl["fail_error"]))
        ),
        "failures": pool.failures,
        "goal_distance": float(
            np.mean(np.linalg.norm(pool.states.pos[:, :2] - pool.task.target_xy, axis=-1))
        ),
    }


def adapt(pool: TtaPool, planner: PlannerHandle, triple: NetworkTriple,
          tcfg: TtaConfig, cfg, seed: int, p2r=None, progress=None) -> list[dict]:
    """Run the full adaptation schedule; returns per-epoch metrics."""
    rng = RngStream(seed)
    adam = AdamState(lr=tcfg.learning_rate)
    history = []
    for epoch in range(tcfg.epochs):
        metrics = tta_epoch(pool, planner, triple, adam, tcfg, cfg, epoch, rng, p2r)
        history.append(metrics)
        if progress and (epoch + 1) % 10 == 0:
            progress(epoch + 1, metrics)
    return history
