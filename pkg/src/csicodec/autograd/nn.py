"""Layer containers on top of the functional ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


def Parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Holds parameters (tensors with ``requires_grad``), non-trainable
    buffers (plain arrays) and child modules as attributes.

    Names are dotted attribute paths; list-valued attributes of modules are
    indexed (``blocks.0.conv1.weight``).
    """

    training: bool = True

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers().items()}
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if strict:
            missing = expected - set(state)
            unexpected = set(state) - expected
            if missing or unexpected:
                raise KeyError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
                )
        for name, value in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.stride = stride
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel / (stride * stride)
        self.stride = stride
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_in, c_out, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Parameter(np.full(channels, init))

    def forward(self, x: Tensor) -> Tensor:
        return F.prelu(x, self.slope)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
