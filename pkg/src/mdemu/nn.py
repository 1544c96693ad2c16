"""Parameter containers and pointwise layers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, contract, gelu


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Attribute-registered parameter tree.

    Parameters are leaf tensors with ``requires_grad``; child modules, lists
    and dicts of modules are walked in attribute insertion order, so names are
    stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ChannelMix(Module):
    """1x1 convolution on ``(B, C, H, W)`` feature maps."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(c_in)
        self.weight = parameter(rng.standard_normal((c_in, c_out)) * scale)
        self.bias = parameter(np.zeros((c_out, 1, 1))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = contract("bchw,co->bohw", x, self.weight)
        return y + self.bias if self.bias is not None else y


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.standard_normal((n_in, n_out)) * scale)
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return contract("bi,io->bo", x, self.weight) + self.bias


class MLP(Module):
    """Two-layer perceptron with a GELU hidden layer."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.fc1 = Dense(n_in, n_hidden, rng)
        self.fc2 = Dense(n_hidden, n_out, rng, zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class ChannelMLP(Module):
    """Pointwise channel mixer ``C -> hidden -> C`` with GELU."""

    def __init__(self, c: int, hidden: int, rng: np.random.Generator, c_out: int | None = None):
        self.fc1 = ChannelMix(c, hidden, rng)
        self.fc2 = ChannelMix(hidden, c if c_out is None else c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
