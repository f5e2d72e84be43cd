"""Parameter containers shared by the attention, routing, and backbone modules.

A Module is a plain object whose trainable tensors are discovered by walking
instance attributes in insertion order. Names are stable per architecture,
which the checkpoint format relies on.
"""

import numpy as np

from . import tensor as T
from .errors import DimensionError


class Module:
    """Base class providing recursive, deterministic parameter discovery."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            out.extend(_collect(path, value))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


def _collect(path, value):
    if isinstance(value, T.Tensor):
        return [(path, value)] if value.requires_grad else []
    if isinstance(value, Module):
        return value.named_parameters(prefix=f"{path}.")
    if isinstance(value, (list, tuple)):
        out = []
        for i, item in enumerate(value):
            out.extend(_collect(f"{path}.{i}", item))
        return out
    return []


def parameter(values):
    return T.Tensor(values, requires_grad=True)


def normal_init(rng, shape, std):
    return parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    """Affine map x @ W + b over the last axis of a rank-2 input."""

    def __init__(self, in_dim, out_dim, rng=None, zero_init=False):
        if zero_init:
            self.weight = parameter(np.zeros((in_dim, out_dim)))
        else:
            if rng is None:
                raise DimensionError("Linear requires an rng unless zero_init is set")
            self.weight = normal_init(rng, (in_dim, out_dim), 1.0 / np.sqrt(in_dim))
        self.bias = parameter(np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    """Learnable gain/bias around the layernorm primitive."""

    def __init__(self, dim):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layernorm(x, self.gain, self.bias)
