"""Parameter containers and the handful of layers the models share."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from luve.errors import ContractError
from luve.numerics import Tensor, XorShiftRNG, concat, layer_norm, pad, softmax
from luve.numerics import tensor as T


class Module:
    """Named-parameter container with stable dotted names (``blocks.0.attn.wq``)."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, m in enumerate(value):
                self._modules[f"{name}.{i}"] = m
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, d_in: int, d_out: int, rng: XorShiftRNG, bias: bool = True,
                 zero: bool = False, dtype=np.float32, std: float | None = None):
        super().__init__()
        if zero:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal((d_out, d_in)) * (std if std is not None else 1.0 / np.sqrt(d_in))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ T.transpose(self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, affine: bool = True):
        super().__init__()
        self.affine = affine
        if affine:
            self.gain = param(np.ones(dim), dtype)
            self.shift = param(np.zeros(dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = layer_norm(x)
        return y * self.gain + self.shift if self.affine else y


class MLP(Module):
    def __init__(self, dims: list[int], rng: XorShiftRNG, dtype=np.float32, zero_last: bool = False):
        super().__init__()
        n = len(dims) - 1
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, dtype=dtype, zero=zero_last and i == n - 1) for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over ``(..., L, d)`` inputs."""
    *lead, lq, d = q.shape
    lk = k.shape[-2]
    dh = d // heads

    def split(x, n):
        x = x.reshape(*lead, n, heads, dh)
        nd = len(lead)
        return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = (qh @ T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    out = softmax(scores, axis=-1) @ vh
    nd = len(lead)
    out = T.transpose(out, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return out.reshape(*lead, lq, d)


class Conv3x3(Module):
    """3x3 'same' convolution over ``(frames, h, w, c)`` via nine shifted views."""

    def __init__(self, d_in: int, d_out: int, rng: XorShiftRNG, dtype=np.float32, zero: bool = False):
        super().__init__()
        self.proj = Linear(9 * d_in, d_out, rng, dtype=dtype, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        t, h, w, c = x.shape
        xp = pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        views = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
        return self.proj(concat(views, axis=-1))
