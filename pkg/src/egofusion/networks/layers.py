"""Module container and the basic trainable layers."""
from __future__ import annotations

import numpy as np

from ..tensor import Parameter, ops
from ..tensor.core import config


class Module:
    """Attribute-walking container in the spirit of the usual NN libraries.

    Parameters are discovered through instance attributes (including lists
    and dicts of modules). A parameter object reachable twice is reported
    once, under the first name it is found.
    """

    training = True

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def _own_parameters(self):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def named_parameters(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for name, p in self._own_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                yield prefix + name, p
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def name_parameters(self):
        """Stamp every parameter with its hierarchical name."""
        for name, p in self.named_parameters():
            p.name = name
        return self

    def named_buffers(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for name in getattr(self, "_buffers", ()):
            arr = getattr(self, name)
            if id(arr) not in seen:
                seen.add(id(arr))
                yield prefix + name, arr
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".", seen)

    def modules(self):
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, target in list(params.items()) + [(n, b) for n, b in buffers.items()]:
            arr = np.asarray(state[name])
            dest = target.data if isinstance(target, Parameter) else target
            if arr.shape != dest.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {dest.shape}")
            dest[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """BN layer; also the holder of per-channel scales used for channel exchange."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        if eps <= 0 or not 0 < momentum < 1:
            raise ValueError("invalid BN hyper-parameters")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=config.dtype)
        self.running_var = np.ones(channels, dtype=config.dtype)
        self.momentum, self.eps = momentum, eps

    @property
    def channels(self):
        return self.gamma.shape[0]

    def forward(self, x):
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                self.training, self.momentum, self.eps)


BatchNormState = BatchNorm2d


class Linear(Module):
    def __init__(self, in_f, out_f, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / in_f), size=(out_f, in_f)))
        self.bias = Parameter(np.zeros(out_f))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)
