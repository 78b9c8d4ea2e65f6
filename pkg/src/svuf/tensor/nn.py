"""Parameterised layers and a minimal module tree."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops as C
from . import functional as F
from .autograd import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training: bool = True

    def __init__(self):
        self.training = True
        self._buffers: dict[str, Optional[np.ndarray]] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, (Parameter, Module)) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Optional[np.ndarray]]]:
        for key, value in self._buffers.items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            if buf is not None:
                state[name] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for m_prefix, module in self._named_modules():
            for key in module._buffers:
                name = f"{m_prefix}{key}"
                module._buffers[key] = np.array(state[name]) if name in state else None

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{key}.")


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    """Zero-mean normal weights with variance gain / fan_in.

    The default gain of 2 suits layers followed by ReLU; purely linear layers
    (projections, logits, attention scores) use gain 1 so that chains of them
    keep their activations at unit scale.
    """
    return rng.standard_normal(shape) * math.sqrt(gain / fan_in)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(kaiming(rng, (n_in, n_out), n_in, gain))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.affine(x, self.weight, self.bias)


class Conv(Module):
    """1D or 2D convolution layer; ``kernel`` length fixes the dimensionality."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        kernel: tuple[int, ...],
        rng: np.random.Generator,
        stride=1,
        dilation=1,
        padding=0,
        bias: bool = True,
        gain: float = 2.0,
    ):
        super().__init__()
        kernel = tuple(kernel)
        fan_in = n_in * int(np.prod(kernel))
        self.weight = Parameter(kaiming(rng, (n_out, n_in) + kernel, fan_in, gain))
        self.bias = Parameter(np.zeros(n_out)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return C.conv(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


def same_padding(kernel: tuple[int, ...], dilation=1) -> tuple[int, ...]:
    """Padding that keeps a stride-1 convolution length-preserving."""
    dil = (dilation,) * len(kernel) if isinstance(dilation, int) else tuple(dilation)
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel, dil))


class ConvTranspose(Module):
    def __init__(
        self, n_in: int, n_out: int, kernel: tuple[int, ...], rng: np.random.Generator, stride=2, gain: float = 1.0
    ):
        super().__init__()
        kernel = tuple(kernel)
        strides = (stride,) * len(kernel) if isinstance(stride, int) else tuple(stride)
        # each output position receives about n_in * prod(kernel / stride) terms
        fan_in = max(n_in * int(np.prod(kernel)) // int(np.prod(strides)), n_in)
        self.weight = Parameter(kaiming(rng, (n_in, n_out) + kernel, fan_in, gain))
        self.bias = Parameter(np.zeros(n_out))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return C.conv_transpose(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    """Batch normalization with running statistics for eval mode."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self._buffers = {"running_mean": None, "running_var": None}

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = C.batch_norm(x, self.gamma, self.beta, self.eps)
            m = x.size // x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            if rm is None:
                self._buffers["running_mean"], self._buffers["running_var"] = mu.copy(), unbiased
            else:
                a = self.momentum
                self._buffers["running_mean"] = (1 - a) * rm + a * mu
                self._buffers["running_var"] = (1 - a) * rv + a * unbiased
            return out
        rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
        if rm is None:
            raise RuntimeError("BatchNorm in eval mode has no running statistics; run a train step first")
        return C.batch_norm(x, self.gamma, self.beta, self.eps, running=(rm, rv))[0]


class LSTM(Module):
    """Unidirectional LSTM layer over (N, T, input) sequences."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in + hidden, 4 * hidden)))
        self.bias = Parameter(rng.uniform(-bound, bound, 4 * hidden))
        self.hidden = hidden

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return lstm_step(x, state, self.weight, self.bias)

    def forward(
        self,
        x: Tensor,
        state: Optional[tuple[Tensor, Tensor]] = None,
        truncate: Optional[int] = None,
    ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Run all steps; with ``truncate`` the state is detached every that many steps."""
        n, t = x.shape[:2]
        if state is None:
            state = (Tensor(np.zeros((n, self.hidden))), Tensor(np.zeros((n, self.hidden))))
        outputs = []
        for step in range(t):
            if truncate and step and step % truncate == 0:
                state = (state[0].detach(), state[1].detach())
            state = self.step(x[:, step, :], state)
            outputs.append(state[0])
        return F.stack(outputs, axis=1), state


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Gated recurrence: sigmoid input/forget/output gates, tanh candidate."""
    h, c = state
    hid = h.shape[1]
    both = C.lstm_cell(x, h, c, weight, bias)
    return both[:, :hid], both[:, hid:]
