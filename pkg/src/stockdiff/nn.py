"""Parameter containers and the few layers the denoiser is built from."""

from __future__ import annotations

import numpy as np

from stockdiff import tensor as T
from stockdiff.tensor import Tensor


class Module:
    """Holds named parameters and child modules; names are dotted paths."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, value):
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, m in self._children.items():
            out.update(m.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        own = self.named_parameters()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _glorot(rng, fan_in, fan_out, shape):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape) * scale


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, scale=1.0):
        super().__init__()
        self.w = self.param("w", _glorot(rng, d_in, d_out, (d_in, d_out)) * scale)
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class CausalConv1d(Module):
    """Dilated causal convolution over channels-last input ``(..., time, channels)``.

    Output at time t only sees inputs at t, t-d, t-2d, ... (zero history
    before the start of the sequence).
    """

    def __init__(self, c_in, c_out, rng, kernel=2, dilation=1):
        super().__init__()
        self.kernel = kernel
        self.dilation = dilation
        self.w = self.param("w", _glorot(rng, c_in * kernel, c_out, (kernel, c_in, c_out)))
        self.b = self.param("b", np.zeros(c_out))

    def __call__(self, x):
        out = None
        for j in range(self.kernel):
            tap = T.shift(x, j * self.dilation, axis=-2) @ self.w[j]
            out = tap if out is None else out + tap
        return out + self.b
