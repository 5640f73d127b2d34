"""Named parameter arrays owned by one model (encoder or denoiser)."""
from collections import OrderedDict

import numpy as np

from .autodiff import Tensor

OWNERS = ("encoder", "denoiser")


class ParameterStore:
    def __init__(self, owner, dtype=np.float64):
        if owner not in OWNERS:
            raise ValueError(f"owner must be one of {OWNERS}, got {owner!r}")
        self.owner = owner
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()
        self.frozen = False

    def add(self, name, values):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=not self.frozen, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grads(self):
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self._params.items()}

    def freeze(self):
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        self.frozen = False
        for p in self._params.values():
            p.requires_grad = True

    def snapshot(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, arrays):
        for n, values in arrays.items():
            self._params[n].data[...] = values

    def num_values(self):
        return sum(p.data.size for p in self._params.values())


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
