"""Test-time guidance for the motion planner.

A guidance objective is a weighted sum of trajectory-space losses evaluated
on the decoded keypoint trajectory. Two update rules are provided: the
signal-space rule nudges the clean estimate x_0 with gradients that flow only
through the window decoder, while the latent-space baseline differentiates
through the full denoiser to update x_t. `sample_guided` wires either rule
into the sampling loop: predict, guide, re-noise with the shared eps, then
take the posterior step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalFault, Tensor, backward
from .config import HEAD, LEFT_HIP, LEFT_SHOULDER, LEFT_WRIST, RIGHT_HIP, RIGHT_SHOULDER, RIGHT_WRIST, K
from .diffusion import cfg_predict, forward_noise, reverse_step
from .motionrep import FEAT_DIM, Anchor, Condition, Standardizer, decode
from .nets import raw
from .params import ParamSet
from .rng import RngStream

log = logging.getLogger(__name__)


class DegenerateHeading(RuntimeError):
    pass


@dataclass
class GuidanceTerm:
    kind: str  # Obst | Pos | WeightedPos | Head | Smooth | Jerk | HandUp
    weight: float
    target: np.ndarray | None = None  # position for Pos/WeightedPos, heading for Head
    joint: int = 0  # keypoint index for Pos/WeightedPos
    joints: tuple = (0,)  # keypoint set for Obst
    walkable: object = None  # map handle for Obst

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be nonnegative")


@dataclass
class GuidanceConfig:
    iterations: int = 5
    step_size: float = 1.0
    mode: str = "signal-space"
    grid_extent: float = 0.6
    grid_n: int = 10

    def __post_init__(self):
        if self.iterations < 0 or self.step_size < 0:
            raise ValueError("guidance iterations and step size must be nonnegative")


# -- loss terms --------------------------------------------------------------


def _grid_offsets(extent: float, n: int) -> np.ndarray:
    side = np.linspace(-extent / 2.0, extent / 2.0, n)
    gx, gy = np.meshgrid(side, side, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], -1)  # (n*n, 2)


def loss_obst(kpts, walkable, joints=(0,), grid_extent=0.6, grid_n=10):
    """Collision penalty: per frame, 1 - d_min/b between the free and the
    obstacle-overlapping points of a square grid carried by each joint.

    Frames whose grid is entirely free contribute 0; a fully overlapped grid
    saturates at 1. The overlapping points are treated as constants, so the
    gradient pushes the free points (and hence the joint) away from them.
    """
    H = kpts.shape[0]
    for j in joints:
        if not 0 <= j < K:
            raise ValueError(f"joint index out of range: {j}")
    offsets = _grid_offsets(grid_extent, grid_n)
    b = np.sqrt(2.0) * grid_extent
    # occupancy is resolved on the numeric positions only
    base = kpts.data if isinstance(kpts, Tensor) else np.asarray(kpts)
    centers = base[:, list(joints), :2]
    pts = centers[:, :, None, :] + offsets[None, None, :, :]  # (H, J, G, 2)
    occ = walkable.occupied_at(pts.reshape(-1, 2)).reshape(pts.shape[:3])

    total = 0.0
    for h in range(H):
        for ji, j in enumerate(joints):
            mask = occ[h, ji]
            if not mask.any():
                continue
            if mask.all():
                total = ad.add(total, 1.0)
                continue
            grid = ad.add(ad.reshape(kpts[h, j, :2], (1, 2)), offsets)
            free = grid[np.nonzero(~mask)[0]]
            inter = ad.detach(grid[np.nonzero(mask)[0]])
            diff = ad.sub(ad.reshape(free, (-1, 1, 2)), ad.reshape(inter, (1, -1, 2)))
            d_min = ad.tmin(ad.norm(diff, axis=-1))
            total = ad.add(total, ad.sub(1.0, ad.div(d_min, b)))
    return ad.mul(total, 1.0)


def loss_pos(kpts, joint: int, target):
    """Final-frame squared distance of one keypoint to the target."""
    target = np.asarray(target, float)
    p = kpts[-1, joint, : len(target)]
    d = ad.sub(p, target)
    return ad.tsum(ad.mul(d, d))


def loss_weighted_pos(kpts, joint: int, target):
    """Ramped approach: sum_h (h/H) * squared distance at frame h."""
    target = np.asarray(target, float)
    H = kpts.shape[0]
    w = np.arange(1, H + 1) / H
    d = ad.sub(kpts[:, joint, : len(target)], target)
    return ad.tsum(ad.mul(ad.tsum(ad.mul(d, d), axis=-1), w))


def estimate_heading(kpts):
    """Per-frame xy heading from the body frame: z x (hip + shoulder axis).

    Returns (H, 2), unit rows. Raises DegenerateHeading when the lateral
    body axis collapses.
    """
    v = ad.add(
        ad.sub(kpts[:, RIGHT_HIP], kpts[:, LEFT_HIP]),
        ad.sub(kpts[:, RIGHT_SHOULDER], kpts[:, LEFT_SHOULDER]),
    )
    norms = ad.norm(v, axis=-1, keepdims=True)
    if np.any((norms.data if isinstance(norms, Tensor) else norms) < 1e-8):
        raise DegenerateHeading("lateral body axis has near-zero length")
    vn = ad.div(v, norms)
    # z x v, projected to the plane
    return ad.stack([ad.mul(vn[:, 1], -1.0), vn[:, 0]], axis=-1)


def loss_head(kpts, target_heading):
    """Ramped misalignment between estimated and desired heading."""
    u = np.asarray(target_heading, float)[:2]
    u = u / np.linalg.norm(u)
    h_est = estimate_heading(kpts)
    H = kpts.shape[0]
    w = np.arange(1, H + 1) / H
    cos = ad.tsum(ad.mul(h_est, u), axis=-1)
    return ad.tsum(ad.mul(ad.sub(1.0, cos), w))


def loss_smooth(kpts):
    """Squared inter-frame displacement over all keypoints."""
    d = ad.sub(kpts[1:], kpts[:-1])
    return ad.tsum(ad.mul(d, d))


def loss_jerk(kpts):
    """Worst-joint L1 jerk via chained finite differences."""
    if kpts.shape[0] < 4:
        raise ValueError("jerk needs at least 4 frames")
    vel = ad.sub(kpts[1:], kpts[:-1])
    acc = ad.sub(vel[1:], vel[:-1])
    jrk = ad.sub(acc[1:], acc[:-1])
    per_joint = ad.tsum(ad.tsum(ad.absolute(jrk), axis=-1), axis=0)  # (K,)
    return ad.tmax(per_joint)


def loss_hand_up(kpts):
    """Pull both wrists toward the (frozen) head position, all frames."""
    head = ad.detach(kpts[:, HEAD])
    total = 0.0
    for wrist in (LEFT_WRIST, RIGHT_WRIST):
        d = ad.sub(kpts[:, wrist], head)
        total = ad.add(total, ad.tsum(ad.mul(d, d)))
    return total


def evaluate_terms(kpts, terms, gcfg: GuidanceConfig):
    """Weighted guidance objective on a decoded keypoint trajectory."""
    total = 0.0
    for term in terms:
        if term.weight == 0.0:
            continue
        if term.kind == "Obst":
            val = loss_obst(kpts, term.walkable, term.joints, gcfg.grid_extent, gcfg.grid_n)
        elif term.kind == "Pos":
            val = loss_pos(kpts, term.joint, term.target)
        elif term.kind == "WeightedPos":
            val = loss_weighted_pos(kpts, term.joint, term.target)
        elif term.kind == "Head":
            val = loss_head(kpts, term.target)
        elif term.kind == "Smooth":
            val = loss_smooth(kpts)
        elif term.kind == "Jerk":
            val = loss_jerk(kpts)
        elif term.kind == "HandUp":
            val = loss_hand_up(kpts)
        else:
            raise ValueError(f"unknown guidance term: {term.kind}")
        total = ad.add(total, ad.mul(val, term.weight))
    return total


# -- update rules ------------------------------------------------------------


def guide_signal_space(x0: np.ndarray, terms, gcfg: GuidanceConfig, anchor: Anchor,
                       standardizer: Standardizer | None = None):
    """Eq.-style clean-signal updates; gradients flow through the decoder only.

    Returns (updated x0, warned flag).
    """
    x0 = np.array(x0, dtype=float)
    if not terms or gcfg.iterations == 0 or gcfg.step_size == 0.0:
        return x0, False
    for _ in range(gcfg.iterations):
        xt = Tensor(x0, requires_grad=True)
        _, _, kpts = decode(xt, anchor, standardizer=standardizer)
        objective = evaluate_terms(kpts, terms, gcfg)
        if not isinstance(objective, Tensor):
            return x0, False  # every term inactive (e.g. obstacle-free)
        try:
            backward(objective)
        except NumericalFault:
            log.warning("guidance aborted on non-finite gradient")
            return x0, True
        if xt.grad is None:
            return x0, False
        x0 = x0 - gcfg.step_size * xt.grad
    return x0, False


def guide_latent_space(x_t: np.ndarray, t: int, params: ParamSet, sched, context,
                       cond: Condition, scale: float, terms, gcfg: GuidanceConfig,
                       anchor: Anchor, cfg_planner, standardizer: Standardizer | None = None):
    """Latent-space baseline: differentiate the objective through the full
    denoiser and update x_t. Returns (updated x_t, warned flag)."""
    x_t = np.array(x_t, dtype=float)
    if not terms or gcfg.iterations == 0 or gcfg.step_size == 0.0:
        return x_t, False
    for _ in range(gcfg.iterations):
        xt = Tensor(x_t[None], requires_grad=True)
        x0_hat = cfg_predict(params, sched, xt, t, context, cond, scale, cfg_planner)
        _, _, kpts = decode(x0_hat[0], anchor, standardizer=standardizer)
        objective = evaluate_terms(kpts, terms, gcfg)
        if not isinstance(objective, Tensor):
            return x_t, False
        try:
            backward(objective)
        except NumericalFault:
            log.warning("latent guidance aborted on non-finite gradient")
            return x_t, True
        if xt.grad is None:
            return x_t, False
        x_t = x_t - gcfg.step_size * xt.grad[0]
    return x_t, False


def sample_guided(params, sched, context, cond: Condition, terms, gcfg: GuidanceConfig,
                  rng: RngStream, cfg_planner, anchor: Anchor,
                  standardizer: Standardizer | None = None, scale=None):
    """Guided sampling for one window; returns (x0 (H, d), warning count).

    With an empty term list this reduces to the plain sampler bit for bit:
    the rng draw sequence and update lines are identical.
    """
    p_fast = raw(params) if isinstance(params, ParamSet) else params
    H = cfg_planner["window"]
    if scale is None:
        scale = (
            cfg_planner["guidance_scale_target"]
            if cond.target is not None
            else cfg_planner["guidance_scale_text"]
        )
    warnings = 0
    x = rng.normal((1, H, FEAT_DIM))
    eps = rng.normal((1, H, FEAT_DIM))
    for t in range(sched.steps, 0, -1):
        if terms and gcfg.mode == "latent-space":
            x_new, warned = guide_latent_space(
                x[0], t, params, sched, context, cond, scale, terms, gcfg, anchor,
                cfg_planner, standardizer,
            )
            warnings += int(warned)
            x = x_new[None]
        x0_hat = cfg_predict(p_fast, sched, x, t, context, cond, scale, cfg_planner)
        if terms and gcfg.mode == "signal-space":
            x0_new, warned = guide_signal_space(x0_hat[0], terms, gcfg, anchor, standardizer)
            warnings += int(warned)
            x0_hat = x0_new[None]
        x_t = forward_noise(sched, x0_hat, t, eps)
        x = reverse_step(sched, x_t, x0_hat, t, eps)
    return x[0], warnings
