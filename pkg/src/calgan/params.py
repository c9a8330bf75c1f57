"""Named parameter arrays with gradient slots, plus the optimizers."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .numeric import Tensor


class ParameterStore:
    def __init__(self, arrays=None):
        self.tensors = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name, array):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        self.tensors[name] = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        return self.tensors[name]

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in self.tensors.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: t.data.copy() for n, t in self.tensors.items()})

    def to_dict(self):
        return {n: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()} for n, t in self.tensors.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({n: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for n, v in d.items()})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def uniform_init(shapes, rng, scale=0.08):
    """Seeded uniform(-scale, scale) arrays, drawn in name order."""
    return {name: rng.uniform_range(-scale, scale, shape) for name, shape in shapes.items()}


class SGD:
    name = "sgd"

    def __init__(self, lr):
        self.lr = lr

    def step(self, params: ParameterStore, grads=None, ascent=False):
        grads = grads or params.grads()
        sign = 1.0 if ascent else -1.0
        for n, t in params.items():
            t.data = t.data + sign * self.lr * grads[n]

    def state_dict(self):
        return {"name": self.name, "lr": self.lr}

    def load_state_dict(self, d):
        self.lr = d["lr"]


class Adam:
    name = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: ParameterStore, grads=None, ascent=False):
        grads = grads or params.grads()
        self.t += 1
        sign = 1.0 if ascent else -1.0
        for n, t in params.items():
            g = grads[n]
            m = self.m.get(n, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(n, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            t.data = t.data + sign * self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {
            "name": self.name, "lr": self.lr, "t": self.t,
            "m": {n: np.asarray(a).ravel().tolist() for n, a in self.m.items()},
            "v": {n: np.asarray(a).ravel().tolist() for n, a in self.v.items()},
        }

    def load_state_dict(self, d, params=None):
        self.lr, self.t = d["lr"], d["t"]
        shape = (lambda n: params[n].data.shape) if params is not None else (lambda n: (-1,))
        self.m = {n: np.array(a).reshape(shape(n)) for n, a in d["m"].items()}
        self.v = {n: np.array(a).reshape(shape(n)) for n, a in d["v"].items()}


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
