"""Parameter containers, initialisers and the Adam optimiser."""

from __future__ import annotations

import math
from typing import Iterable, Iterator, Optional

import numpy as np

from .autodiff import Tensor, ops


class ParamSet:
    """Named, ordered collection of parameter tensors with per-parameter trainable flags."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        full = f"{self.prefix}{name}"
        if full in self._params:
            raise KeyError(f"duplicate parameter {full}")
        t = Tensor(value, requires_grad=trainable, name=full)
        self._params[full] = t
        self.trainable[full] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[f"{self.prefix}{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}{name}" in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def set_trainable(self, flag: bool, names: Optional[Iterable[str]] = None) -> None:
        targets = self._params if names is None else [f"{self.prefix}{n}" for n in names]
        for full in targets:
            self.trainable[full] = flag
            self._params[full].requires_grad = flag

    def trainable_params(self) -> list[Tensor]:
        return [t for n, t in self._params.items() if self.trainable[n]]

    def count(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for n, t in self._params.items() if self.trainable[n] or not trainable_only))

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n} in state")
            if state[n].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {t.data.shape}")
            t.data = np.array(state[n], dtype=np.float64)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def linear(x, params: ParamSet, name: str):
    """x @ W + b for parameters ``{name}.w`` / ``{name}.b``."""
    y = ops.matmul(x, params[f"{name}.w"])
    if f"{name}.b" in params:
        y = ops.add(y, params[f"{name}.b"])
    return y


def add_linear(params: ParamSet, rng, name: str, n_in: int, n_out: int, bias: bool = True,
               trainable: bool = True, zero: bool = False) -> None:
    w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
    params.add(f"{name}.w", w, trainable)
    if bias:
        params.add(f"{name}.b", np.zeros(n_out), trainable)


def sinusoid_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Adam:
    """Adam with linear warmup and optional global-norm clipping.

    The effective step size at update ``s`` (1-based) is
    ``lr * min(1, s / warmup_steps)``.
    """

    def __init__(self, params: list[Tensor], lr: float, warmup_steps: int = 0,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.clip_events = 0

    def current_lr(self, step: Optional[int] = None) -> float:
        s = self.step_count + 1 if step is None else step
        if self.warmup_steps > 0 and s < self.warmup_steps:
            return self.lr * s / self.warmup_steps
        return self.lr

    def step(self, grads: dict) -> float:
        """Apply one update from a leaf->gradient map; returns the pre-clip global norm."""
        gs = [grads.get(p) for p in self.params]
        gs = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, gs)]
        norm = math.sqrt(float(np.sum([np.sum(g * g) for g in gs])))
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
            gs = [g * factor for g in gs]
            self.clip_events += 1
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m.copy()
            out[f"adam.v.{i}"] = v.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam.step"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"adam.m.{i}"])
            self.v[i] = np.array(state[f"adam.v.{i}"])
