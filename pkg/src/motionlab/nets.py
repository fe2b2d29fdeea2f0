"""Small feedforward networks shared by the controller, twist net, and planner.

Forward functions take a mapping name -> array-or-Tensor. Pass a ParamSet to
build an autodiff graph, or ``raw(params)`` for a plain-numpy fast path (used
in rollouts and diffusion sampling where no gradients are needed).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .params import ParamSet
from .rng import RngStream


def raw(params: ParamSet) -> dict[str, np.ndarray]:
    return {n: t.data for n, t in params.items()}


def linear_init(rng: RngStream, n_in: int, n_out: int, params: ParamSet, prefix: str, scale=None):
    if scale is None:
        scale = np.sqrt(2.0 / (n_in + n_out))
    params.add(f"{prefix}.w", rng.normal((n_in, n_out), scale=scale))
    params.add(f"{prefix}.b", np.zeros(n_out))


def linear(p, x, prefix: str):
    return ad.add(ad.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def mlp_init(rng: RngStream, sizes: list[int], params: ParamSet, prefix: str, out_scale=None):
    """Stack of linear layers; `sizes` runs input -> hidden... -> output."""
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        linear_init(rng, sizes[i], sizes[i + 1], params, f"{prefix}.l{i}",
                    scale=out_scale if (last and out_scale is not None) else None)


def mlp_forward(p, x, prefix: str, n_layers: int, act=ad.tanh):
    h = x
    for i in range(n_layers):
        h = linear(p, h, f"{prefix}.l{i}")
        if i < n_layers - 1:
            h = act(h)
    return h


def layer_norm_init(params: ParamSet, dim: int, prefix: str):
    params.add(f"{prefix}.gain", np.ones(dim))
    params.add(f"{prefix}.bias", np.zeros(dim))


def layer_norm(p, x, prefix: str, eps: float = 1e-6):
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    normed = ad.div(xc, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(normed, p[f"{prefix}.gain"]), p[f"{prefix}.bias"])
