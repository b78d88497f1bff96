"""Layers used by the encoder and the projection/prediction heads."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractViolation, UninitializedStatsError
from .tensor import Parameter, Tensor


def _param(data) -> Parameter:
    return Parameter(data)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container with train/eval mode and deterministic naming.

    Children and parameters are discovered from attributes in assignment
    order, so ``named_parameters`` is stable across runs.
    """

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractViolation(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ContractViolation(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = _param(_uniform(rng, bound, (out_features, in_features)))
        self.bias = _param(_uniform(rng, bound, (out_features,)))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3 (by default) convolution, stride 1, padding preserving spatial size."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = _param(_uniform(rng, bound, shape))
        self.bias = _param(_uniform(rng, bound, (out_channels,)))
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm(Module):
    """Batch normalization over every axis except the channel axis (1).

    Handles both ``[B, C]`` and ``[B, C, H, W]`` inputs. Running variance is
    tracked with the unbiased estimator.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = _param(np.ones(num_features))
        self.beta = _param(np.zeros(num_features))
        self.running_mean = np.zeros(num_features, dtype=np.float64)
        self.running_var = np.ones(num_features, dtype=np.float64)
        self.num_batches_tracked = np.zeros(1, dtype=np.float64)
        # Off for EMA targets, whose statistics come from the online network.
        self.track_running_stats = True

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var
        yield "num_batches_tracked", self.num_batches_tracked

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ContractViolation(
                f"BatchNorm({self.num_features}) got input of shape {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if not self.training:
            if self.num_batches_tracked[0] == 0:
                raise UninitializedStatsError(
                    "BatchNorm in eval mode before any training batch populated running stats")
            out, _, _ = T.batch_norm(x, self.gamma, self.beta, axes, self.eps,
                                     mean=self.running_mean.astype(x.dtype),
                                     var=self.running_var.astype(x.dtype))
            return out
        n = x.data.size // self.num_features
        if n < 2:
            raise ContractViolation("BatchNorm in train mode needs more than one value per channel")
        out, mean, var = T.batch_norm(x, self.gamma, self.beta, axes, self.eps)
        if self.track_running_stats:
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mean
            self.running_var *= 1 - m
            self.running_var += m * var * (n / (n - 1))
            self.num_batches_tracked += 1
        return out


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class MaxPool2d(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x)


class Dropout(Module):
    """Inverted dropout; ``p`` is the drop probability."""

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ContractViolation(f"dropout probability {p} outside [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        return T.dropout(x, 1.0 - self.p, self.rng)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def forward_layer(layer: Module, x: Tensor, mode: str = "train") -> Tensor:
    """Run one layer in ``"train"`` or ``"eval"`` mode."""
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    layer.train(mode == "train")
    return layer(x)
