"""Denoising diffusion over motion windows.

A small encoder-decoder predicts the clean window x_0 from a noised window,
the diffusion step, the past context, and the condition (style token plus
optional target point). Conditioning enters through a memory sequence the
frame tokens cross-attend to; classifier-free training drops the condition to
a learned null embedding.

The forward re-noising and the reverse posterior step follow the planner's
published update rules literally, including the (1 - abar_t) noise factor on
re-noising and a deterministic final step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .config import STYLE_TOKENS, K
from .motionrep import FEAT_DIM, Condition
from .nets import layer_norm, layer_norm_init, linear, linear_init, raw
from .params import AdamState, ParamSet, adam_step_from_grads
from .rng import RngStream

NULL_STYLE = len(STYLE_TOKENS)  # embedding row for the unconditional branch


# -- schedule ----------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Cosine schedule; arrays are indexed by t with alpha_bar[0] = 1."""

    betas: np.ndarray  # (T+1,), index 0 unused
    alphas: np.ndarray
    alpha_bar: np.ndarray  # (T+1,)
    sigmas: np.ndarray  # (T+1,), sigma[1] = 0

    @property
    def steps(self):
        return len(self.betas) - 1


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = np.zeros(T + 1)
    betas[1:] = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas[1:])])
    post_var = np.zeros(T + 1)
    post_var[1:] = betas[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    sigmas = np.sqrt(post_var)
    sigmas[1] = 0.0  # final denoising step is deterministic
    return NoiseSchedule(betas, alphas, alpha_bar, sigmas)


def forward_noise(sched: NoiseSchedule, x0, t: int, eps):
    """Re-noise a clean window to step t: sqrt(abar_t) x0 + (1 - abar_t) eps."""
    ab = sched.alpha_bar[t]
    return ad.add(ad.mul(x0, np.sqrt(ab)), ad.mul(eps, 1.0 - ab))


def reverse_step(sched: NoiseSchedule, x_t, x0_hat, t: int, eps):
    """One posterior step from x_t to x_{t-1} given the clean estimate."""
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    beta = sched.betas[t]
    ab_prev = sched.alpha_bar[t - 1]
    ab = sched.alpha_bar[t]
    c0 = beta * np.sqrt(ab_prev) / (1.0 - ab)
    ct = (1.0 - ab_prev) * np.sqrt(sched.alphas[t]) / (1.0 - ab)
    sigma = sched.sigmas[t]
    out = ad.add(ad.mul(x0_hat, c0), ad.mul(x_t, ct))
    if sigma > 0.0:
        out = ad.add(out, ad.mul(eps, sigma))
    return out


# -- denoiser network --------------------------------------------------------


def init_denoiser(rng: RngStream, cfg_planner) -> ParamSet:
    W = cfg_planner["width"]
    layers = cfg_planner["layers"]
    ffn = cfg_planner["ffn_width"]
    H = cfg_planner["window"]
    P = cfg_planner["context"]
    T = cfg_planner["diffusion_steps"]

    params = ParamSet()
    linear_init(rng, FEAT_DIM, W, params, "emb.frame")
    linear_init(rng, FEAT_DIM, W, params, "emb.ctx")
    linear_init(rng, 2 + K, W, params, "emb.target")  # xy + joint one-hot
    params.add("emb.style", rng.normal((len(STYLE_TOKENS) + 1, W), scale=0.02))
    params.add("emb.time", rng.normal((T + 1, W), scale=0.02))
    params.add("emb.target_null", rng.normal((2 + K,), scale=0.02))
    params.add("pos.frames", rng.normal((H, W), scale=0.02))
    params.add("pos.ctx", rng.normal((P, W), scale=0.02))

    for i in range(layers):
        pre = f"dec{i}"
        layer_norm_init(params, W, f"{pre}.ln1")
        for head in ("q", "k", "v", "o"):
            linear_init(rng, W, W, params, f"{pre}.self.{head}")
        layer_norm_init(params, W, f"{pre}.ln2")
        for head in ("q", "k", "v", "o"):
            linear_init(rng, W, W, params, f"{pre}.cross.{head}")
        layer_norm_init(params, W, f"{pre}.ln3")
        linear_init(rng, W, ffn, params, f"{pre}.ffn.up")
        linear_init(rng, ffn, W, params, f"{pre}.ffn.down")
    layer_norm_init(params, W, "out.ln")
    linear_init(rng, W, FEAT_DIM, params, "out.proj", scale=0.02)
    return params


def _attend(p, x, mem, prefix):
    """Single-head scaled dot-product attention of x over mem."""
    q = linear(p, x, f"{prefix}.q")
    k = linear(p, mem, f"{prefix}.k")
    v = linear(p, mem, f"{prefix}.v")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale)
    att = ad.softmax(scores, axis=-1)
    return linear(p, ad.matmul(att, v), f"{prefix}.o")


def denoise(p, x_t, t, context, style, target, target_joint, cfg_planner):
    """Predict x_0 for a batch.

    p: ParamSet (training graph) or raw dict (sampling fast path)
    x_t: (B, H, d); t: (B,) ints; context: (B, P, d)
    style: (B,) token ids, NULL_STYLE for the unconditional branch
    target: (B, 2) with rows ignored where target_joint < 0
    target_joint: (B,) keypoint index, -1 for "no target"
    """
    if isinstance(p, ParamSet):
        p = {n: tsr for n, tsr in p.items()}
    B = x_t.shape[0]
    W = cfg_planner["width"]
    layers = cfg_planner["layers"]

    frames = ad.add(linear(p, x_t, "emb.frame"), p["pos.frames"])
    ctx_tok = ad.add(linear(p, context, "emb.ctx"), p["pos.ctx"])

    time_tok = ad.reshape(p["emb.time"][np.asarray(t, int)], (B, 1, W))
    style_tok = ad.reshape(p["emb.style"][np.asarray(style, int)], (B, 1, W))

    tj = np.asarray(target_joint, int)
    has = tj >= 0
    tgt_in = np.zeros((B, 2 + K))
    tgt_in[has, :2] = np.asarray(target, float)[has]
    tgt_in[has, 2 + tj[has]] = 1.0
    mask = has.astype(float)[:, None]
    null_row = ad.reshape(p["emb.target_null"], (1, 2 + K))
    tgt_mixed = ad.add(tgt_in * mask, ad.mul(null_row, 1.0 - mask))
    target_tok = ad.reshape(linear(p, tgt_mixed, "emb.target"), (B, 1, W))

    mem = ad.concat([time_tok, style_tok, target_tok, ctx_tok], axis=1)

    h = frames
    for i in range(layers):
        pre = f"dec{i}"
        hn = layer_norm(p, h, f"{pre}.ln1")
        h = ad.add(h, _attend(p, hn, hn, f"{pre}.self"))
        h = ad.add(h, _attend(p, layer_norm(p, h, f"{pre}.ln2"), mem, f"{pre}.cross"))
        hn = layer_norm(p, h, f"{pre}.ln3")
        h = ad.add(h, linear(p, ad.tanh(linear(p, hn, f"{pre}.ffn.up")), f"{pre}.ffn.down"))
    return linear(p, layer_norm(p, h, "out.ln"), "out.proj")


# -- training ----------------------------------------------------------------


def condition_dropout(style, target_joint, rng: RngStream, rate: float):
    """Replace the whole condition with the null branch at the given rate."""
    style = np.array(style, dtype=int)
    tj = np.array(target_joint, dtype=int)
    drop = rng.uniform(0.0, 1.0, (len(style),)) < rate
    style[drop] = NULL_STYLE
    tj[drop] = -1
    return style, tj


def train_step(params, sched, batch, rng: RngStream, cfg_planner, adam: AdamState):
    """One Eq.-style reconstruction step; returns the scalar loss."""
    x0 = batch["x0"]
    B = x0.shape[0]
    t = rng.integers(1, sched.steps + 1, (B,))
    eps = rng.normal(x0.shape)
    # standard forward marginal q(x_t | x_0); the guided sampler's re-noising
    # step deliberately differs (see forward_noise)
    ab = sched.alpha_bar[t][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    style, tj = condition_dropout(batch["style"], batch["target_joint"], rng,
                                  cfg_planner["cond_drop"])

    x0_hat = denoise(params, x_t, t, batch["context"], style, batch["target"], tj, cfg_planner)
    diff = ad.sub(x0_hat, x0)
    loss = ad.tmean(ad.mul(diff, diff))
    backward(loss)
    adam_step_from_grads(params, adam)
    params.zero_grads()
    return float(loss.data)


def train_planner(corpus, cfg, seed: int, steps=None, progress=None):
    from .corpus import sample_batch

    cfgp = cfg["planner"]
    rng = RngStream(seed)
    params = init_denoiser(rng.spawn(0), cfgp)
    sched = cosine_schedule(cfgp["diffusion_steps"])
    adam = AdamState(lr=cfgp["learning_rate"])
    losses = []
    n = steps if steps is not None else cfgp["train_steps"]
    for i in range(n):
        batch = sample_batch(corpus, rng, cfgp["batch"])
        losses.append(train_step(params, sched, batch, rng, cfgp, adam))
        if progress and (i + 1) % 50 == 0:
            progress(i + 1, losses[-1])
    return params, sched, losses


# -- sampling ----------------------------------------------------------------


def cfg_predict(p, sched, x_t, t, context, cond: Condition, scale: float, cfg_planner):
    """Classifier-free blend (1 - s) G(null) + s G(cond) for one batch."""
    B = x_t.shape[0]
    tb = np.full(B, t, dtype=int)
    if cond.style is None:
        style = np.full(B, NULL_STYLE)
        tj = np.full(B, -1)
        tgt = np.zeros((B, 2))
    else:
        style = np.full(B, cond.style)
        if cond.target is None:
            tj = np.full(B, -1)
            tgt = np.zeros((B, 2))
        else:
            tj = np.full(B, cond.target_joint)
            tgt = np.tile(np.asarray(cond.target, float), (B, 1))
    g_cond = denoise(p, x_t, tb, context, style, tgt, tj, cfg_planner)
    if scale == 1.0:
        return g_cond
    null_style = np.full(B, NULL_STYLE)
    null_tj = np.full(B, -1)
    g_null = denoise(p, x_t, tb, context, null_style, np.zeros((B, 2)), null_tj, cfg_planner)
    if scale == 0.0:
        return g_null
    return ad.add(ad.mul(g_null, 1.0 - scale), ad.mul(g_cond, scale))


def sample(params, sched, context, cond: Condition, rng: RngStream, cfg_planner, scale=None):
    """Plain reverse-process sampling (no guidance); returns (B, H, d)."""
    p = raw(params) if isinstance(params, ParamSet) else params
    B = context.shape[0]
    H = cfg_planner["window"]
    if scale is None:
        scale = (
            cfg_planner["guidance_scale_target"]
            if cond.target is not None
            else cfg_planner["guidance_scale_text"]
        )
    # one shared eps drives both the re-noising and the posterior step; the
    # guided sampler follows the same structure with its inner loop inserted
    x = rng.normal((B, H, FEAT_DIM))
    eps = rng.normal((B, H, FEAT_DIM))
    for t in range(sched.steps, 0, -1):
        x0_hat = cfg_predict(p, sched, x, t, context, cond, scale, cfg_planner)
        x_t = forward_noise(sched, x0_hat, t, eps)
        x = reverse_step(sched, x_t, x0_hat, t, eps)
    return x
