"""Layer modules with a named parameter registry."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import ConvSpec, Tensor


class Module:
    """Base class: tracks parameters, buffers and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy ``state`` into this module; any missing, extra or mis-shaped entry is an error."""
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        extra = sorted(set(state) - set(targets))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ValueError(f"state entry {name}: shape {src.shape} != expected {dst.shape}")
        for name, dst in targets.items():
            dst[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self.add_module(str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv(Module):
    """N-d convolution; ``stride`` may be a tuple or a callable of the input extents."""

    def __init__(self, rank: int, in_channels: int, out_channels: int, kernel=3, stride=1,
                 padding=None, bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.rank = rank
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kernel,) * rank if isinstance(kernel, int) else tuple(kernel)
        self.padding = tuple(k // 2 for k in self.kernel) if padding is None else padding
        self.stride = stride
        fan_in = in_channels * int(np.prod(self.kernel))
        bound = np.sqrt(6.0 / fan_in)
        shape = (out_channels, in_channels) + self.kernel
        self.weight = Tensor._wrap(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.bias = ag.zeros((out_channels,), requires_grad=True) if bias else None

    def spec_for(self, spatial) -> ConvSpec:
        stride = self.stride(spatial) if callable(self.stride) else self.stride
        return ConvSpec.make(self.rank, self.in_channels, self.out_channels, self.kernel, stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv(x, self.weight, self.bias, self.spec_for(x.shape[2:]))


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = ag.constant((channels,), 1.0, requires_grad=True)
        self.beta = ag.zeros((channels,), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ag.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_features)
        self.weight = Tensor._wrap(rng.uniform(-bound, bound, size=(out_features, in_features)),
                                   requires_grad=True)
        self.bias = ag.zeros((out_features,), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return ag.relu(x)


class DecisionHead(Module):
    """Linear layer to one logit followed by a sigmoid."""

    def __init__(self, in_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.fc = Linear(in_features, 1, rng)

    def logit(self, features: Tensor) -> Tensor:
        return ag.reshape(self.fc(features), (features.shape[0],))

    def forward(self, features: Tensor) -> Tensor:
        return ag.sigmoid(self.logit(features))
