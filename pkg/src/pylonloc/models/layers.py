"""Parameter-holding layers on top of :mod:`pylonloc.tensor_ops`."""
from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .. import tensor_ops as T
from ..errors import ConfigurationError


class Module:
    """Tiny container with named parameters, buffers and a train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, T.Param):
            self._params[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, T.Param]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, b in self._buffers.items():
            yield prefix + key, b
        for key, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - (set(own) | set(bufs))
        if missing or unexpected:
            raise ConfigurationError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ConfigurationError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


class Conv2d(Module):
    """Odd-kernel 'same' convolution with He-normal init."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, pad_mode: str = "zeros", dtype=np.float32,
                 init_std: Optional[float] = None):
        super().__init__()
        std = np.sqrt(2.0 / (c_in * k * k)) if init_std is None else init_std
        self.weight = T.Param(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype), "weight")
        if bias:
            self.bias = T.Param(np.zeros(c_out, dtype=dtype), "bias")
        else:
            self.bias = None
        self.stride = stride
        self.padding = k // 2
        self.pad_mode = pad_mode

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = T.BN_MOMENTUM, eps: float = 1e-5):
        super().__init__()
        self.gamma = T.Param(np.ones(c, dtype=dtype), "gamma")
        self.beta = T.Param(np.zeros(c, dtype=dtype), "beta")
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, c: int, n_groups: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        if c % n_groups:
            raise ConfigurationError(f"{c} channels not divisible into {n_groups} groups")
        self.gamma = T.Param(np.ones(c, dtype=dtype), "gamma")
        self.beta = T.Param(np.zeros(c, dtype=dtype), "beta")
        self.n_groups = n_groups
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.group_norm(x, self.n_groups, self.gamma, self.beta, self.eps)


def make_norm(kind: str, c: int, n_groups: int, dtype) -> Module:
    if kind == "batch":
        return BatchNorm2d(c, dtype=dtype)
    if kind == "group":
        # channels fewer than the requested groups (1-channel pyramid maps) fall back to one group per channel
        return GroupNorm(c, min(n_groups, c), dtype=dtype)
    raise ConfigurationError(f"unknown norm {kind!r}")


class ConvNormAct(Module):
    """conv (no bias) -> norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 norm: str = "batch", n_groups: int = 32, pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride, bias=False, pad_mode=pad_mode, dtype=dtype)
        self.norm = make_norm(norm, c_out, n_groups, dtype)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.relu(self.norm(self.conv(x)))
