"""Parameter containers built on the autodiff core."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import RunningStats, Tensor, ops


class Module:
    """Holds parameters, running statistics and child modules in attribute order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, RunningStats):
                yield f"{name}.mean", value.mean
                yield f"{name}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        obj = getattr(self, head)
        if isinstance(obj, (list, tuple)):
            idx, _, rest = rest.partition(".")
            obj = obj[int(idx)]
        if isinstance(obj, RunningStats):
            setattr(obj, rest, np.array(value, dtype=np.float64))
        else:
            obj.set_buffer(rest, value)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = RunningStats(channels, momentum)

    def __call__(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running, mode)


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / f_in), size=(f_in, f_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
