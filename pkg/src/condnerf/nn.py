"""Parameter containers and layers built on :mod:`condnerf.autodiff`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .errors import ContractError


class Module:
    """Base class collecting parameters in attribute-definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, ad.Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return OrderedDict((n, p.values) for n, p in self.named_parameters())

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.values[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(values):
    return ad.Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, scale=None):
        scale = np.sqrt(2.0 / n_in) if scale is None else scale
        self.weight = _param(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """NHWC convolution with weights stored as (kh, kw, C_in, C_out)."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, spectral_norm=False):
        fan_in = kernel * kernel * c_in
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, c_in, c_out)))
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding
        self.spectral = SpectralNorm(fan_in, c_out, rng) if spectral_norm else None

    def effective_weight(self):
        if self.spectral is None:
            return self.weight
        return self.spectral.normalize(self.weight)

    def __call__(self, x):
        return ad.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class SpectralNorm:
    """Persistent power-iteration estimate of a weight's top singular value.

    The weight is viewed as a (fan_in, fan_out) matrix. Singular vectors are
    plain arrays, so gradients flow only through the weight itself.
    """

    def __init__(self, fan_in, fan_out, rng):
        u = rng.normal(size=fan_out)
        self.u = u / np.linalg.norm(u)
        self.v = np.zeros(fan_in)

    def power_iterate(self, weight, iterations=1):
        wm = np.asarray(weight.values if isinstance(weight, ad.Tensor) else weight, dtype=np.float64)
        wm = wm.reshape(-1, wm.shape[-1])
        u = self.u
        for _ in range(iterations):
            v = wm @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u = wm.T @ v
            u /= max(np.linalg.norm(u), 1e-12)
        self.u, self.v = u, v

    def sigma(self, weight):
        wm = weight.reshape(-1, weight.shape[-1])
        outer = np.outer(self.v, self.u).astype(weight.dtype)
        return ad.sum(wm * outer)

    def normalize(self, weight):
        if not np.any(self.v):
            self.power_iterate(weight)
        return weight / self.sigma(weight)
