"""Layer set, parameter store and checkpoint format for HARU-Net.

Reverse-mode differentiation is delegated to torch autograd; this module
fixes the layer semantics, the deterministic initializer, MAC accounting
of executed layers, and the on-disk checkpoint layout.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def as_tensor4(data, requires_grad: bool = False, dtype=torch.float32) -> torch.Tensor:
    """Validate and wrap an N x C x H x W array."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    if t.dim() != 4 or min(t.shape) < 1:
        raise ShapeError(f"expected a non-empty 4D array, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError("tensor contains non-finite entries")
    return t.requires_grad_(requires_grad)


# ---------------------------------------------------------------- functional ops

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 1):
    # weight layout: (C_in, C_out, k, k)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def leaky_relu(x, slope: float = 0.01):
    return torch.where(x >= 0, x, x * slope)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    """Normalize over the last (embedding) axis."""
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"layer_norm: features {x.shape[-1]} vs gain {gain.shape[-1]}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def softmax_lastdim(x):
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def global_avg_pool(x):
    """N x C x H x W -> N x C."""
    return x.mean(dim=(2, 3))


def sigmoid(x):
    return torch.sigmoid(x)


def gelu(x):
    return F.gelu(x)


def mlp(x, fc1, fc2, activation=gelu):
    """Two linear layers with ``activation`` in between (``fc*`` are Linear modules)."""
    return fc2(activation(fc1(x)))


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable parameter's ``.grad``."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    if loss.grad_fn is None:
        raise RuntimeError("backward called before a forward pass recorded a graph")
    loss.reshape(()).backward()


# ---------------------------------------------------------------- MAC accounting

_COUNTERS: list["MacCounter"] = []


class MacCounter(contextlib.AbstractContextManager):
    """Collects per-layer MACs of every layer executed inside the context."""

    def __init__(self):
        self.per_layer: "OrderedDict[str, int]" = OrderedDict()

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)
        return False

    def add(self, path: str, n: int) -> None:
        self.per_layer[path] = self.per_layer.get(path, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def record_macs(module: "Layer", n: int, suffix: str = "") -> None:
    if _COUNTERS:
        path = module.path + suffix
        for c in _COUNTERS:
            c.add(path, n)


# ---------------------------------------------------------------- layers

class Layer(nn.Module):
    """Base for layers that know their dotted parameter path."""

    path = ""


def _uniform(shape, fan_in, gen, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, *, gen, dtype=torch.float32):
        super().__init__()
        self.stride, self.padding, self.k = stride, padding, k
        fan_in = c_in * k * k
        self.weight = nn.Parameter(_uniform((c_out, c_in, k, k), fan_in, gen, dtype))
        self.bias = nn.Parameter(_uniform((c_out,), fan_in, gen, dtype))

    def forward(self, x):
        y = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        c_out, c_in = self.weight.shape[:2]
        record_macs(self, self.k * self.k * c_in * c_out * y.shape[2] * y.shape[3] * y.shape[0])
        return y


class ConvTranspose2d(Layer):
    def __init__(self, c_in, c_out, k=4, stride=2, padding=1, *, gen, dtype=torch.float32):
        super().__init__()
        self.stride, self.padding, self.k = stride, padding, k
        fan_in = c_in * k * k
        self.weight = nn.Parameter(_uniform((c_in, c_out, k, k), fan_in, gen, dtype))
        self.bias = nn.Parameter(_uniform((c_out,), fan_in, gen, dtype))

    def forward(self, x):
        y = conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
        c_in, c_out = self.weight.shape[:2]
        # every input pixel scatters k*k taps per output channel
        record_macs(self, self.k * self.k * c_in * c_out * x.shape[2] * x.shape[3] * x.shape[0])
        return y


class Linear(Layer):
    """Affine map over the last axis."""

    def __init__(self, d_in, d_out, *, gen, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(_uniform((d_out, d_in), d_in, gen, dtype))
        self.bias = nn.Parameter(_uniform((d_out,), d_in, gen, dtype))

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear: features {x.shape[-1]} vs {self.weight.shape[1]}")
        tokens = x.numel() // x.shape[-1]
        record_macs(self, tokens * self.weight.shape[0] * self.weight.shape[1])
        return x @ self.weight.t() + self.bias


class LayerNorm(Layer):
    def __init__(self, d, *, dtype=torch.float32):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


def assign_paths(root: nn.Module) -> None:
    for name, mod in root.named_modules():
        if isinstance(mod, Layer):
            mod.path = name


# ---------------------------------------------------------------- parameter store

class ParameterStore:
    """Named view of a module's trainable arrays and their gradients."""

    def __init__(self, module: nn.Module):
        self._module = module
        self._params = OrderedDict(module.named_parameters())

    def __len__(self):
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name: str) -> torch.Tensor:
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.detach().cpu().numpy().copy()) for k, p in self._params.items())

    def load_state(self, state) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        with torch.no_grad():
            for k, p in self._params.items():
                arr = torch.as_tensor(np.asarray(state[k]), dtype=p.dtype)
                if arr.shape != p.shape:
                    raise ShapeError(f"{k}: shape {tuple(arr.shape)} vs {tuple(p.shape)}")
                p.copy_(arr)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state, path) -> None:
    """``HCKPT v1 <count>`` then per entry a ``name ndim dims...`` line and raw float32 LE data."""
    with open(path, "wb") as fh:
        fh.write(f"HCKPT v1 {len(state)}\n".encode("ascii"))
        for name, arr in state.items():
            a = np.asarray(arr, dtype="<f4").copy(order="C")
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter name {name!r} contains whitespace")
            dims = " ".join(str(d) for d in a.shape)
            fh.write(f"{name} {a.ndim} {dims}\n".encode("ascii"))
            fh.write(a.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii", "replace").split()
        if len(head) != 3 or head[:2] != ["HCKPT", "v1"]:
            raise ValueError(f"{path}: not an HCKPT v1 checkpoint")
        for _ in range(int(head[2])):
            parts = fh.readline().decode("ascii").split()
            if len(parts) < 2 or len(parts) != 2 + int(parts[1]):
                raise ValueError(f"{path}: malformed entry header {parts}")
            shape = tuple(int(d) for d in parts[2:])
            n = int(np.prod(shape, dtype=np.int64))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated data for {parts[0]}")
            out[parts[0]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {head[2]} entries")
    return out
