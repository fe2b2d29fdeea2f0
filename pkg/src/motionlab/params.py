"""Named parameter sets, the Adam optimizer, EMA targets, and checkpoint IO.

A ParamSet is an ordered mapping name -> Tensor. Shapes are fixed at
construction; optimizer steps mutate values in place. The on-disk format is a
flat binary stream: header (magic, version, count), then per tensor the name,
rank, dims, and a little-endian float64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

_MAGIC = b"PSET"
_VERSION = 1


class ParamSet:
    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for name, t in tensors.items():
                self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.items()})

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def load_values(self, other: "ParamSet"):
        """Copy values from `other` in place (names and shapes must match)."""
        if other.names() != self.names():
            raise ValueError("parameter names do not match")
        for n, t in self.items():
            src = other[n].data
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for '{n}': {src.shape} vs {t.data.shape}")
            t.data = src.copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    # -- serialization ------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<II", _VERSION, len(self._tensors)))
            for name, t in self.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<B", t.data.ndim))
                for dim in t.data.shape:
                    f.write(struct.pack("<I", dim))
                f.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        out = cls()
        with open(path, "rb") as f:
            if f.read(4) != _MAGIC:
                raise ValueError(f"not a parameter file: {path}")
            version, count = struct.unpack("<II", f.read(8))
            if version != _VERSION:
                raise ValueError(f"unsupported parameter file version {version}")
            for _ in range(count):
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<B", f.read(1))
                dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
                n_items = int(np.prod(dims)) if rank else 1
                data = np.frombuffer(f.read(8 * n_items), dtype="<f8").reshape(dims)
                out.add(name, data.astype(np.float64))
        return out


@dataclass
class AdamState:
    lr: float = 2.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState) -> ParamSet:
    """One Adam update with bias correction. Missing gradients count as zero."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for '{name}': {g.shape} vs {t.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        t.data = t.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def adam_step_from_grads(params: ParamSet, state: AdamState) -> ParamSet:
    """Adam update reading gradients accumulated on the parameter tensors."""
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
    return adam_step(params, grads, state)


def ema_update(target: ParamSet, online: ParamSet, alpha: float) -> ParamSet:
    """target <- alpha * target + (1 - alpha) * online, per tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if target.names() != online.names():
        raise ValueError("parameter names do not match")
    for name, t in target.items():
        o = online[name].data
        if o.shape != t.data.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        t.data = alpha * t.data + (1.0 - alpha) * o
    return target
