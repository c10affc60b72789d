"""Layers, optimizers and learning-rate schedules shared by both training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ParameterError,
    Tensor,
    UsageError,
    add,
    gelu,
    l2_normalize,
    matmul,
    transpose,
)


class LinearLayer:
    """y = x W^T + b with weight stored as (out, in)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)
        self.bias = None if bias is None else Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
               std: float = 0.02, bias: bool = True) -> "LinearLayer":
        w = rng.normal(0.0, std, size=(out_dim, in_dim))
        b = np.zeros(out_dim) if bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, bias: bool = True) -> "LinearLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim) if bias else None)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = add(out, self.bias)
        return out

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ProjectionHead:
    """Three-layer MLP into a bottleneck, L2 normalization, then a
    weight-normalized linear map to the output dimension.

    The last layer carries no bias; its weight rows are renormalized to unit
    norm by `renormalize` (call it after every optimizer step). `activation`
    is "gelu" in practice; "identity" exists for norm-invariance checks.
    """

    def __init__(self, in_dim: int, hidden_dim: int, bottleneck_dim: int,
                 out_dim: int, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in ("gelu", "identity"):
            raise ParameterError(f"unknown head activation {activation!r}")
        self.activation = activation
        self.fc1 = LinearLayer.create(in_dim, hidden_dim, rng)
        self.fc2 = LinearLayer.create(hidden_dim, hidden_dim, rng)
        self.fc3 = LinearLayer.create(hidden_dim, bottleneck_dim, rng)
        w = rng.normal(0.0, 0.02, size=(out_dim, bottleneck_dim))
        self.out_weight = Tensor(w, requires_grad=True)
        self.renormalize()

    def _act(self, x: Tensor) -> Tensor:
        return gelu(x) if self.activation == "gelu" else x

    def bottleneck(self, f: Tensor) -> Tensor:
        """Unit-norm bottleneck embedding (the input to the final layer)."""
        h = self._act(self.fc1(f))
        h = self._act(self.fc2(h))
        return l2_normalize(self.fc3(h), axis=-1)

    def __call__(self, f: Tensor) -> Tensor:
        return matmul(self.bottleneck(f), transpose(self.out_weight, (1, 0)))

    def renormalize(self) -> None:
        """Scale each output unit's weight vector back to unit norm."""
        w = self.out_weight.data
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        np.divide(w, np.maximum(norms, 1e-12), out=w)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in (self.fc1, self.fc2, self.fc3):
            params.extend(layer.parameters())
        params.append(self.out_weight)
        return params


# -- optimizers -----------------------------------------------------------


class SGDMomentum:
    """v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise UsageError("optimizer step with missing gradient")
            v *= self.momentum
            v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"velocity": [v.copy() for v in self.velocity]}

    def load_state(self, state: dict) -> None:
        self.velocity = [v.copy() for v in state["velocity"]]


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.04):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise UsageError("optimizer step with missing gradient")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- schedules ------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to base_lr, then cosine decay to final_lr."""

    base_lr: float
    warmup_epochs: float
    final_lr: float
    total_epochs: float

    def at(self, epoch: float) -> float:
        if epoch < 0 or epoch > self.total_epochs:
            raise ParameterError(f"epoch {epoch} outside [0, {self.total_epochs}]")
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.base_lr * epoch / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span <= 0:
            return self.final_lr
        phase = (epoch - self.warmup_epochs) / span
        return self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + math.cos(math.pi * phase))


@dataclass(frozen=True)
class CosineRamp:
    """Cosine interpolation from start to end over total_epochs."""

    start: float
    end: float
    total_epochs: float

    def at(self, epoch: float) -> float:
        if epoch < 0 or epoch > self.total_epochs:
            raise ParameterError(f"epoch {epoch} outside [0, {self.total_epochs}]")
        if self.total_epochs == 0:
            return self.end
        phase = epoch / self.total_epochs
        return self.end + 0.5 * (self.start - self.end) * (1.0 + math.cos(math.pi * phase))
