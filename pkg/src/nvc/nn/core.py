"""Parameters, models, initializers, Adam and gradient clipping."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np


class Parameter:
    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


class Model:
    """Named parameter container shared by the three networks."""

    kind = "base"

    def __init__(self, config: dict):
        self.config = dict(config)
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def accumulate(self, prefix: str, grads: dict):
        for k, g in grads.items():
            self.params[prefix + k].grad += g

    def freeze(self, patterns):
        """Freeze every parameter whose name starts with (or globs to) a pattern."""
        for p in self.params.values():
            p.frozen = any(p.name.startswith(pat) or fnmatch.fnmatchcase(p.name, pat)
                           for pat in patterns)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if self.params[k].value.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].value.shape}")
            self.params[k].value[...] = v


# -- initializers -------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def gru_recurrent_init(rng: np.random.Generator, hidden: int) -> np.ndarray:
    """[H, 3H] recurrent weight: one orthogonal H x H block per gate (QR of a Gaussian)."""
    blocks = []
    for _ in range(3):
        q, r = np.linalg.qr(rng.standard_normal((hidden, hidden)))
        blocks.append(q * np.sign(np.diag(r))[None, :])
    return np.concatenate(blocks, axis=1)


def add_dense(model: Model, rng, name: str, n_in: int, n_out: int, zero=False):
    model.add(f"{name}.W", np.zeros((n_in, n_out)) if zero else xavier_uniform(rng, (n_in, n_out), n_in, n_out))
    model.add(f"{name}.b", np.zeros(n_out))


def add_gru(model: Model, rng, name: str, n_in: int, hidden: int):
    model.add(f"{name}.Wx", xavier_uniform(rng, (n_in, 3 * hidden), n_in, hidden))
    model.add(f"{name}.Wh", gru_recurrent_init(rng, hidden))
    model.add(f"{name}.bx", np.zeros(3 * hidden))
    model.add(f"{name}.bh", np.zeros(3 * hidden))


def add_conv(model: Model, rng, name: str, kernel: int, c_in: int, c_out: int):
    model.add(f"{name}.W", xavier_uniform(rng, (kernel, c_in, c_out), kernel * c_in, kernel * c_out))
    model.add(f"{name}.b", np.zeros(c_out))


def sub(model: Model, prefix: str) -> dict[str, np.ndarray]:
    """Parameter values under ``prefix.`` keyed by their short name."""
    n = len(prefix) + 1
    return {k[n:]: p.value for k, p in model.params.items() if k.startswith(prefix + ".")}


# -- optimisation ---------------------------------------------------------------

class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict[str, Parameter]):
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p.value)
                self.v[k] = np.zeros_like(p.value)


def clip_gradients(params: dict[str, Parameter], max_norm: float = 5.0) -> float:
    """Scale trainable gradients in place so their global L2 norm is <= max_norm."""
    live = [p for p in params.values() if not p.frozen]
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in live)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in live:
            p.grad *= scale
    return norm


def adam_step(params: dict[str, Parameter], state: AdamState):
    """Bias-corrected Adam update; frozen parameters keep their values."""
    state.ensure(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        if p.grad is None or p.grad.shape != p.value.shape:
            raise MissingGradientError(f"parameter {k} has no gradient this step")
        if p.frozen:
            continue
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
